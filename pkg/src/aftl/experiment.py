"""Experiment orchestration: the headline run and the ablation grid.

`run_experiment` wires datasets -> federation -> metrics emission for one
configuration; `run_ablation` sweeps the eight-task grid (with/without the
client discriminator x {5,10} clients x {100..800} samples) over shared
seed offsets and summarizes per-arm accuracy spreads.

Metrics files contain only deterministic columns (identical config and seed
reproduce them byte for byte); per-round wall-clock times go to a separate
timings.csv sidecar. Final summaries are written via write-then-rename so
aborts never leave a partial summary behind.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels, datasets, federation
from .config import resolve_data_paths
from .errors import ConfigurationError
from .messages import Channel, RecordingChannel
from .nncore import LayerSpec, ModelParams, check_specs, init_params

METRICS_COLUMNS = ("round", "source_loss", "domain_loss", "consistency_loss",
                   "target_accuracy")

ABLATION_TASKS = (
    ("A1", False, 5, 200), ("A2", False, 10, 100),
    ("A3", False, 5, 800), ("A4", False, 10, 400),
    ("C1", True, 5, 200), ("C2", True, 10, 100),
    ("C3", True, 5, 800), ("C4", True, 10, 400),
)


def _sub_seed(base, *tags):
    return np.random.SeedSequence([int(base)] + [int(t) for t in tags])


def extractor_specs(input_shape, config):
    """The feature extractor stack for one per-sample input shape."""
    if config.extractor == "conv":
        channels, h, w = input_shape
        specs = [LayerSpec.conv2d(channels, 8, 5, stride=2), LayerSpec.relu(),
                 LayerSpec.flatten()]
        flat = int(np.prod(check_specs(specs, input_shape)))
        specs += [LayerSpec.dense(flat, config.feature_dim), LayerSpec.relu()]
        return specs
    flat = int(np.prod(input_shape))
    return [LayerSpec.flatten(), LayerSpec.dense(flat, config.feature_dim),
            LayerSpec.relu()]


def classifier_specs(config):
    return [LayerSpec.dense(config.feature_dim, config.classes)]


def discriminator_specs(config, n_clients_total):
    """Client discriminator stack: `disc_depth` hidden layers of width
    `disc_hidden`, then the (clients+1)-way head.

    Depth is load-bearing: with fan-in initialization each relu layer
    attenuates the backward signal, so a deep narrow stack keeps the
    adversarial feedback to the extractors a small fraction of their
    classification gradients. Shallow or wide discriminators feed back
    noise strong enough to walk the target extractor off the feature
    manifold within a few dozen rounds.
    """
    specs = [LayerSpec.dense(config.feature_dim, config.disc_hidden), LayerSpec.relu()]
    for _ in range(config.disc_depth - 1):
        specs += [LayerSpec.dense(config.disc_hidden, config.disc_hidden), LayerSpec.relu()]
    return specs + [LayerSpec.dense(config.disc_hidden, n_clients_total)]


def build_federation(source_shards, target_train, target_test, config):
    """Assemble participant states with seeds derived from config.seed."""
    input_shape = source_shards[0].images.shape[1:]
    if config.extractor == "conv" and len(input_shape) != 3:
        raise ConfigurationError(
            f"conv extractor needs (C,H,W) samples, got shape {input_shape}")
    ext = extractor_specs(input_shape, config)
    clf = classifier_specs(config)
    disc = discriminator_specs(config, len(source_shards) + 1)
    sources = []
    for i, shard in enumerate(source_shards, start=1):
        sources.append(federation.SourceClientState(
            client_id=i,
            extractor=init_params(ext, _sub_seed(config.seed, 10, i)),
            classifier=init_params(clf, _sub_seed(config.seed, 11, i)),
            shard=shard,
            rng=np.random.default_rng(_sub_seed(config.seed, 12, i)),
        ))
    target = federation.TargetClientState(
        extractor=init_params(ext, _sub_seed(config.seed, 10, 0)),
        train_shard=target_train,
        test_set=target_test,
        rng=np.random.default_rng(_sub_seed(config.seed, 12, 0)),
    )
    server = federation.ServerState(
        discriminator=init_params(disc, _sub_seed(config.seed, 13)))
    ModelParams(sources[0].extractor, sources[0].classifier,
                server.discriminator).validate(config.classes, len(source_shards) + 1)
    schedule = federation.RoundSchedule(
        rounds=config.rounds, init_epochs=config.init_epochs,
        batch_size=config.batch_size, eta=config.learning_rate,
        discriminator_enabled=config.discriminator,
        consistency_enabled=config.consistency)
    return federation.FederationState(sources, target, server, schedule)


def load_and_partition(config):
    """Load the IDX pool, partition it, and shift the target shards."""
    images_path, labels_path = resolve_data_paths(config)
    pool = datasets.load_idx(images_path, labels_path)
    plan = datasets.PartitionPlan(
        source_counts=tuple([config.samples_per_client] * config.clients),
        target_train=config.target_train, target_test=config.target_test,
        seed=config.seed, label_skew=config.label_skew)
    shards, target_train, target_test = datasets.partition(pool, plan)
    spec = datasets.DomainShiftSpec(config.shift_degrees, config.shift_scale,
                                    config.shift_noise)
    if not spec.is_identity:
        target_train = datasets.apply_shift(
            target_train, spec, seed=_sub_seed(config.seed, 20).generate_state(1)[0])
        target_test = datasets.apply_shift(
            target_test, spec, seed=_sub_seed(config.seed, 21).generate_state(1)[0])
    return shards, target_train, target_test


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_summary(path, summary):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


@dataclass
class ExperimentResult:
    config: object
    rows: list
    summary: dict
    metrics_path: str
    summary_path: str


def run_experiment(config, source_shards=None, target_train=None, target_test=None):
    """Initialization plus `rounds` federated rounds; emits metrics files.

    Pre-partitioned shards may be injected (the ablation grid and tests use
    this); otherwise the configured dataset is loaded and partitioned.
    Returns an ExperimentResult; raises NumericError on non-finite losses.
    """
    config.validate()
    if source_shards is None:
        source_shards, target_train, target_test = load_and_partition(config)
    if len(source_shards) != config.clients:
        raise ConfigurationError(
            f"{len(source_shards)} shards for {config.clients} clients")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    timings_path = out_dir / "timings.csv"
    summary_path = out_dir / "summary.json"
    channel = RecordingChannel(out_dir / "transcript.bin") if config.transcript else Channel()

    started = time.perf_counter()
    rows = []
    try:
        fed = build_federation(source_shards, target_train, target_test, config)
        federation.run_initialization(fed, representative=config.representative,
                                      channel=channel)
        with open(metrics_path, "w") as metrics_fh, open(timings_path, "w") as timings_fh:
            metrics_fh.write(",".join(METRICS_COLUMNS) + "\n")
            timings_fh.write("round,wall_ms\n")
            for _ in range(config.rounds):
                row = federation.run_round(fed, channel=channel)
                rows.append(row)
                metrics_fh.write(",".join((
                    str(row.round_index), _format_value(row.source_loss),
                    _format_value(row.domain_loss), _format_value(row.consistency_loss),
                    _format_value(row.target_accuracy))) + "\n")
                timings_fh.write(f"{row.round_index},{row.wall_ms:.3f}\n")
    finally:
        channel.close()

    accuracies = [r.target_accuracy for r in rows if not math.isnan(r.target_accuracy)]
    summary = {
        "rounds_completed": len(rows),
        "final_accuracy": accuracies[-1] if accuracies else None,
        "best_accuracy": max(accuracies) if accuracies else None,
        "final_source_loss": rows[-1].source_loss if rows else None,
        "clients": config.clients,
        "samples_per_client": config.samples_per_client,
        "seed": config.seed,
        "discriminator": config.discriminator,
        "consistency": config.consistency,
        "kernel_backend": _kernels.BACKEND,
    }
    _write_summary(summary_path, summary)
    wall_s = time.perf_counter() - started
    return ExperimentResult(config, rows, {**summary, "wall_s": wall_s},
                            str(metrics_path), str(summary_path))


@dataclass
class AblationCell:
    task: str
    discriminator: bool
    clients: int
    samples_per_client: int
    seed: int
    final_accuracy: float = float("nan")
    error: str = ""


def ablation_grid(config, tasks=None):
    """The grid: every task under `ablation_seeds` shared seed offsets."""
    cells = []
    for task, disc, clients, samples in (tasks or ABLATION_TASKS):
        for offset in range(config.ablation_seeds):
            cells.append(AblationCell(task, disc, clients, samples,
                                      seed=config.seed + offset))
    return cells


def run_ablation(config, tasks=None):
    """Run the grid; emits ablation.csv plus per-arm spread summary.

    `tasks` overrides the default eight-task grid (a single cell degenerates
    to a plain run_experiment). Cell failures are recorded and the remaining
    cells continue. Returns (cells, summary dict).
    """
    config.validate()
    tasks = tasks or ABLATION_TASKS
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = ablation_grid(config, tasks)
    for cell in cells:
        derived = dataclasses.replace(
            config, clients=cell.clients, samples_per_client=cell.samples_per_client,
            discriminator=cell.discriminator, seed=cell.seed,
            representative=min(config.representative, cell.clients),
            out_dir=str(out_dir / f"{cell.task}_seed{cell.seed}"),
            transcript=False)
        try:
            result = run_experiment(derived)
            cell.final_accuracy = result.summary["final_accuracy"]
        except Exception as exc:  # record and continue with the other cells
            cell.error = f"{type(exc).__name__}: {exc}"

    table_path = out_dir / "ablation.csv"
    with open(table_path, "w") as fh:
        fh.write("task,discriminator,clients,samples,seed,final_accuracy,error\n")
        for c in cells:
            acc = _format_value(c.final_accuracy)
            fh.write(f"{c.task},{int(c.discriminator)},{c.clients},"
                     f"{c.samples_per_client},{c.seed},{acc},{c.error}\n")

    def median_by_task(task):
        accs = [c.final_accuracy for c in cells
                if c.task == task and not c.error and not math.isnan(c.final_accuracy)]
        return statistics.median(accs) if accs else float("nan")

    medians = {task: median_by_task(task) for task, *_ in tasks}

    def arm_spread(prefix):
        values = [medians[t] for t in medians if t.startswith(prefix)
                  and not math.isnan(medians[t])]
        return (max(values) - min(values)) if values else float("nan")

    summary = {
        "task_medians": medians,
        "spread_without_discriminator": arm_spread("A"),
        "spread_with_discriminator": arm_spread("C"),
        "seeds_per_task": config.ablation_seeds,
    }
    _write_summary(out_dir / "ablation_summary.json", summary)
    return cells, summary
