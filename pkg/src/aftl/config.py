"""Experiment configuration: flat key=value files plus CLI overrides.

Defaults follow the headline setting: 10 source clients x 1500 samples,
1000 unlabeled target training samples plus 1000 labeled evaluation
samples, batch 100, 100 rounds, learning rate 0.01, conv extractor.
Dataset paths resolve from explicit keys, then `data_dir`, then the
`AFTL_DATA_DIR` environment variable, then `./data`.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

TRAIN_IMAGE_NAMES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")
TRAIN_LABEL_NAMES = ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte")


@dataclass
class ExperimentConfig:
    # data
    train_images: str = ""
    train_labels: str = ""
    data_dir: str = ""
    # federation size
    clients: int = 10
    samples_per_client: int = 1500
    target_train: int = 1000
    target_test: int = 1000
    classes: int = 10
    # schedule
    rounds: int = 100
    init_epochs: int = 5
    batch_size: int = 100
    learning_rate: float = 0.01
    discriminator: bool = True
    consistency: bool = True
    representative: int = 1
    # target domain shift
    shift_degrees: float = 0.0
    shift_scale: float = 1.0
    shift_noise: float = 0.0
    # model
    extractor: str = "conv"
    feature_dim: int = 64
    # discriminator shape: deliberately deep and narrow. Fan-in init plus
    # relu attenuate the backward feedback gain per layer, which keeps the
    # adversarial push on the extractors gentle; wide/shallow discriminators
    # destabilize long runs (calibrated empirically).
    disc_hidden: int = 16
    disc_depth: int = 11
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/experiment"
    label_skew: bool = False
    transcript: bool = False
    ablation_seeds: int = 3

    def validate(self):
        if self.clients < 1:
            raise ConfigurationError("need at least one source client")
        if min(self.samples_per_client, self.target_train, self.target_test,
               self.classes, self.batch_size) < 1:
            raise ConfigurationError("sample counts, classes and batch size must be positive")
        if self.rounds < 0 or self.init_epochs < 0:
            raise ConfigurationError("rounds and init_epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.extractor not in ("conv", "dense"):
            raise ConfigurationError(f"extractor must be conv or dense, got {self.extractor!r}")
        if self.feature_dim < 1 or self.disc_hidden < 1 or self.disc_depth < 1:
            raise ConfigurationError("model sizes must be positive")
        if not 1 <= self.representative <= self.clients:
            raise ConfigurationError(
                f"representative {self.representative} outside [1, {self.clients}]")
        if self.ablation_seeds < 1:
            raise ConfigurationError("ablation_seeds must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name, raw):
    field = _FIELDS.get(name)
    if field is None:
        raise ConfigurationError(f"unknown config key {name!r}")
    raw = raw.strip()
    if field.type in ("bool", bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{name}: {exc}") from exc
    return raw


def load_config(path):
    """Parse a flat key=value file (# comments, blank lines ignored)."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = _coerce(key.strip(), raw)
    return ExperimentConfig(**values)


def apply_overrides(config, overrides):
    """Return a copy of `config` with non-None override values applied."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    for key in changes:
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r}")
    return dataclasses.replace(config, **changes)


def resolve_data_paths(config):
    """Locate the IDX training pair; raises FileNotFoundError with fetch
    instructions when the files are absent (there is no auto-download)."""
    if config.train_images and config.train_labels:
        for p in (config.train_images, config.train_labels):
            if not Path(p).exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
        return config.train_images, config.train_labels
    roots = []
    if config.data_dir:
        roots.append(Path(config.data_dir))
    env = os.environ.get("AFTL_DATA_DIR")
    if env:
        roots.append(Path(env))
    roots.append(Path("data"))
    for root in roots:
        for img_name in TRAIN_IMAGE_NAMES:
            for suffix in ("", ".gz"):
                img = root / (img_name + suffix)
                if not img.exists():
                    continue
                for lbl_name in TRAIN_LABEL_NAMES:
                    for lsuffix in ("", ".gz"):
                        lbl = root / (lbl_name + lsuffix)
                        if lbl.exists():
                            return str(img), str(lbl)
    searched = ", ".join(str(r) for r in roots)
    raise FileNotFoundError(
        "MNIST IDX files not found (searched: " + searched + "). Download "
        "train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz manually "
        "(e.g. from https://ossci-datasets.s3.amazonaws.com/mnist/) and place "
        "them in ./data or point AFTL_DATA_DIR / data_dir at them.")
