"""Finite-difference gradient oracle.

Central differences (step 1e-5) on randomly probed parameter coordinates,
compared against the analytic backward pass. Gradient-reversal layers are
handled explicitly: the numeric derivative sees the identity forward map, so
for parameters upstream of a reversal the analytic gradient must equal the
*negated* numeric one; the checker applies that sign per layer.

`run_suite` is the library side of the `aftl gradcheck` subcommand: it
spreads a probe budget over every layer kind, the reversal path, and all
three losses.
"""

from __future__ import annotations

import numpy as np

from . import losses
from .errors import ConfigurationError
from .nncore import LayerSpec, backward, forward, init_params

FD_STEP = 1e-5


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-12, abs(numeric))


def numeric_gradient(func, x, index, step=FD_STEP):
    """Central difference of scalar `func` w.r.t. one coordinate of `x`."""
    x_plus = x.copy()
    x_plus[index] += step
    x_minus = x.copy()
    x_minus[index] -= step
    return (func(x_plus) - func(x_minus)) / (2.0 * step)


def _default_input_shape(specs):
    first = specs[0]
    if first.kind == "conv2d":
        side = 2 * first.kernel + 1
        return (first.in_channels, side, side)
    for spec in specs:
        if spec.kind == "dense":
            return (spec.in_dim,)
        if spec.kind == "conv2d":
            side = 2 * spec.kernel + 1
            return (spec.in_channels, side, side)
    raise ConfigurationError("cannot infer an input shape for these specs")


def _reversal_signs(specs):
    # analytic = sign * numeric for parameters of each layer; one sign flip
    # per reversal layer downstream of it
    signs = []
    for i in range(len(specs)):
        flips = sum(1 for s in specs[i + 1:] if s.kind == "grl")
        signs.append(-1.0 if flips % 2 else 1.0)
    return signs


def finite_diff_check(specs, seed, probe_count, input_shape=None, batch=4,
                      step=FD_STEP):
    """Max relative error between analytic and central-difference gradients.

    Builds a seeded network, a seeded batch, and a fixed random projection
    of the output as the scalar loss, then probes `probe_count` randomly
    chosen parameter coordinates.
    """
    if probe_count < 1:
        raise ConfigurationError("probe_count must be >= 1")
    net = init_params(specs, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))
    shape = tuple(input_shape) if input_shape is not None else _default_input_shape(specs)
    x = rng.normal(size=(batch, *shape))
    out, tape = forward(net, x, record=True)
    projection = rng.normal(size=out.shape)

    _, grads = backward(net, tape, projection)
    signs = _reversal_signs(net.specs)

    # flat list of probe sites: (layer, tensor slot, coordinate)
    sites = []
    for li, w in enumerate(net.weights):
        if w is None:
            continue
        for slot in (0, 1):
            for flat in range(w[slot].size):
                sites.append((li, slot, flat))
    if not sites:
        raise ConfigurationError("no parameters to probe")
    chosen = rng.choice(len(sites), size=min(probe_count, len(sites)), replace=False)

    def loss_at(layer, slot, flat, value):
        saved = net.weights[layer][slot].flat[flat]
        net.weights[layer][slot].flat[flat] = value
        try:
            y, _ = forward(net, x, record=False)
            return float((y * projection).sum())
        finally:
            net.weights[layer][slot].flat[flat] = saved

    worst = 0.0
    for probe in chosen:
        layer, slot, flat = sites[probe]
        theta = net.weights[layer][slot].flat[flat]
        numeric = (loss_at(layer, slot, flat, theta + step)
                   - loss_at(layer, slot, flat, theta - step)) / (2.0 * step)
        analytic = grads.per_layer[layer][slot].flat[flat]
        worst = max(worst, relative_error(analytic, signs[layer] * numeric))
    return worst


def _check_loss_gradient(loss_fn, arrays, grads, rng, probes, step=FD_STEP):
    """FD-check a multi-array loss: probes random coordinates of each array."""
    worst = 0.0
    flat_sites = [(ai, flat) for ai, a in enumerate(arrays) for flat in range(a.size)]
    chosen = rng.choice(len(flat_sites), size=min(probes, len(flat_sites)), replace=False)
    for probe in chosen:
        ai, flat = flat_sites[probe]

        def scalar(value):
            saved = arrays[ai].flat[flat]
            arrays[ai].flat[flat] = value
            try:
                return loss_fn(arrays)
            finally:
                arrays[ai].flat[flat] = saved

        theta = arrays[ai].flat[flat]
        numeric = (scalar(theta + step) - scalar(theta - step)) / (2.0 * step)
        analytic = grads[ai].flat[flat]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_suite(seed=0, probes=200):
    """Gradient fidelity suite: returns [(check name, max relative error)].

    Covers every layer kind, the reversal path, and the three losses,
    spreading `probes` across the checks.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
    share = max(1, probes // 8)
    results = []

    dense_net = [LayerSpec.dense(7, 9), LayerSpec.relu(), LayerSpec.dense(9, 4)]
    results.append(("dense+relu stack", finite_diff_check(dense_net, seed + 1, share)))

    conv_net = [LayerSpec.conv2d(2, 3, 3, stride=2), LayerSpec.relu(),
                LayerSpec.flatten(), LayerSpec.dense(48, 5)]
    results.append(("conv2d+flatten stack",
                    finite_diff_check(conv_net, seed + 2, share, input_shape=(2, 9, 9))))

    grl_net = [LayerSpec.dense(6, 8), LayerSpec.relu(), LayerSpec.grl(),
               LayerSpec.dense(8, 3)]
    results.append(("gradient reversal path", finite_diff_check(grl_net, seed + 3, share)))

    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    _, g = losses.classification_loss(logits, labels)
    results.append(("classification loss", _check_loss_gradient(
        lambda a: losses.classification_loss(a[0], labels)[0], [logits], [g], rng, share)))

    batches = [(rng.normal(size=(4, 3)), rng.integers(0, 3, size=4)) for _ in range(3)]
    _, _, dg = losses.domain_loss(batches)
    arrays = [logits_ for logits_, _ in batches]
    domain_labels = [lab for _, lab in batches]
    results.append(("domain loss", _check_loss_gradient(
        lambda a: losses.domain_loss(list(zip(a, domain_labels)))[0],
        arrays, dg, rng, share)))

    preds = [losses.softmax(rng.normal(size=(6, 5))) for _ in range(3)]
    _, cg = losses.consistency_loss(preds)
    results.append(("consistency loss", _check_loss_gradient(
        lambda a: losses.consistency_loss(a)[0], preds, cg, rng, share)))

    # consistency gradient pulled through the softmax, as source clients do
    raw = [rng.normal(size=(6, 5)) for _ in range(3)]
    probs = [losses.softmax(r) for r in raw]
    _, pg = losses.consistency_loss(probs)
    logit_grads = [losses.softmax_backward(p, g) for p, g in zip(probs, pg)]
    results.append(("consistency loss through softmax", _check_loss_gradient(
        lambda a: losses.consistency_loss([losses.softmax(r) for r in a])[0],
        raw, logit_grads, rng, share)))

    involution = rng.normal(size=(3, 4))
    from .nncore import grl_backward
    roundtrip = grl_backward(grl_backward(involution))
    results.append(("reversal involution", float(np.abs(roundtrip - involution).max())))
    return results
