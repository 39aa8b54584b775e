"""Dense-tensor neural core with hand-derived forward/backward passes.

Five layer kinds: dense, conv2d (valid padding), relu, flatten, and grl
(gradient reversal: identity forward, exact negation backward). All math is
float64. Parameter slices are `Network` objects; a `Tape` records the
activations of one forward pass and is bound to the parameters that produced
it by a version stamp, so backward against stale parameters is refused.

Every array is a plain float64 ndarray; callers never see any other dtype.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, NumericError, ProtocolError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "grl")

_uid_counter = itertools.count(1)


def as_tensor(values):
    """Coerce to a float64 ndarray (the package-wide tensor carrier)."""
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a stack: a kind plus its kind-specific sizes."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1

    @staticmethod
    def dense(in_dim, out_dim):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigurationError(f"dense dims must be positive, got {in_dim}x{out_dim}")
        return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)

    @staticmethod
    def conv2d(in_channels, out_channels, kernel, stride=1):
        if min(in_channels, out_channels, kernel, stride) <= 0:
            raise ConfigurationError(
                f"conv2d dims must be positive, got {in_channels}->{out_channels} k{kernel} s{stride}")
        return LayerSpec("conv2d", in_channels=in_channels,
                         out_channels=out_channels, kernel=kernel, stride=stride)

    @staticmethod
    def relu():
        return LayerSpec("relu")

    @staticmethod
    def flatten():
        return LayerSpec("flatten")

    @staticmethod
    def grl():
        return LayerSpec("grl")


@dataclass
class GradientBuffer:
    """Per-layer gradients, shape-congruent with the owning Network.

    `per_layer[i]` is None for parameter-free layers and a (weight_grad,
    bias_grad) pair for dense/conv2d layers.
    """

    per_layer: list

    @staticmethod
    def zeros_like(net: "Network") -> "GradientBuffer":
        grads = []
        for w in net.weights:
            grads.append(None if w is None else (np.zeros_like(w[0]), np.zeros_like(w[1])))
        return GradientBuffer(grads)

    def add(self, other: "GradientBuffer") -> "GradientBuffer":
        """Elementwise accumulate `other` into this buffer (in place)."""
        if len(self.per_layer) != len(other.per_layer):
            raise ShapeError("gradient buffers disagree on layer count")
        for mine, theirs in zip(self.per_layer, other.per_layer):
            if mine is None:
                continue
            mine[0][...] += theirs[0]
            mine[1][...] += theirs[1]
        return self


@dataclass
class Network:
    """An ordered parameter slice: layer specs plus their weight tensors.

    `weights[i]` is a (W, b) pair for dense/conv2d layers and None for
    parameter-free kinds. `version` increments on every parameter change and
    ties tapes to the exact parameters they were recorded under.
    """

    specs: list[LayerSpec]
    weights: list
    version: int = 0
    uid: int = field(default_factory=lambda: next(_uid_counter))

    def copy(self) -> "Network":
        """Deep copy with a fresh identity (used for parameter broadcast)."""
        fresh = [None if w is None else (w[0].copy(), w[1].copy()) for w in self.weights]
        return Network(list(self.specs), fresh)

    def load_weights(self, tensors):
        """Replace parameter tensors (flat [W1, b1, W2, b2, ...] order)."""
        flat = list(tensors)
        expected = sum(2 for w in self.weights if w is not None)
        if len(flat) != expected:
            raise ShapeError(f"expected {expected} parameter tensors, got {len(flat)}")
        pos = 0
        for i, w in enumerate(self.weights):
            if w is None:
                continue
            # copies: broadcast recipients must never alias the sender
            new_w, new_b = as_tensor(flat[pos]).copy(), as_tensor(flat[pos + 1]).copy()
            if new_w.shape != w[0].shape or new_b.shape != w[1].shape:
                raise ShapeError("parameter tensor shape mismatch", layer_index=i)
            self.weights[i] = (new_w, new_b)
            pos += 2
        self.version += 1

    def flat_weights(self):
        """Parameter tensors in flat [W1, b1, ...] order (no copies)."""
        out = []
        for w in self.weights:
            if w is not None:
                out.extend(w)
        return out

    @property
    def output_width(self):
        """Output width of the final dense layer, if there is one."""
        for spec in reversed(self.specs):
            if spec.kind == "dense":
                return spec.out_dim
        return None


@dataclass
class ModelParams:
    """The three parameter sets of one federation participant family."""

    extractor: Network
    classifier: Network
    discriminator: Network

    def validate(self, num_classes, num_clients_total):
        if self.classifier.output_width != num_classes:
            raise ConfigurationError(
                f"classifier output width {self.classifier.output_width} != {num_classes} classes")
        if self.discriminator.output_width != num_clients_total:
            raise ConfigurationError(
                f"discriminator output width {self.discriminator.output_width} "
                f"!= {num_clients_total} clients")


@dataclass
class Tape:
    """Activation record of one recorded forward pass."""

    net_uid: int
    version: int
    inputs: list  # per-layer saved forward inputs
    batch_size: int


def check_specs(specs, input_shape=None):
    """Validate dimension compatibility of consecutive layers.

    With `input_shape` (the per-sample shape, batch excluded) the full chain
    is checked; without it only statically decidable adjacencies are.
    Raises ConfigurationError on the first incompatibility.
    """
    if not specs:
        raise ConfigurationError("empty layer spec list")
    for spec in specs:
        if spec.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
    shape = tuple(input_shape) if input_shape is not None else None
    prev_dense_out = None
    prev_channels = None
    for i, spec in enumerate(specs):
        if spec.kind == "dense":
            if prev_dense_out is not None and spec.in_dim != prev_dense_out:
                raise ConfigurationError(
                    f"layer {i}: dense expects {spec.in_dim} inputs, previous layer emits {prev_dense_out}")
            if shape is not None:
                if len(shape) != 1 or shape[0] != spec.in_dim:
                    raise ConfigurationError(
                        f"layer {i}: dense expects width {spec.in_dim}, incoming shape {shape}")
                shape = (spec.out_dim,)
            prev_dense_out, prev_channels = spec.out_dim, None
        elif spec.kind == "conv2d":
            if prev_channels is not None and spec.in_channels != prev_channels:
                raise ConfigurationError(
                    f"layer {i}: conv2d expects {spec.in_channels} channels, previous emits {prev_channels}")
            if shape is not None:
                if len(shape) != 3 or shape[0] != spec.in_channels:
                    raise ConfigurationError(
                        f"layer {i}: conv2d expects (C,H,W) with C={spec.in_channels}, incoming shape {shape}")
                if shape[1] < spec.kernel or shape[2] < spec.kernel:
                    raise ConfigurationError(
                        f"layer {i}: kernel {spec.kernel} larger than input {shape[1]}x{shape[2]}")
                oh, ow = _kernels.output_hw(shape[1], shape[2], spec.kernel, spec.stride)
                shape = (spec.out_channels, oh, ow)
            prev_dense_out, prev_channels = None, spec.out_channels
        elif spec.kind == "flatten":
            if shape is not None:
                shape = (int(np.prod(shape)),)
                prev_dense_out = shape[0]
        # relu and grl preserve shape and width
    return shape


def init_params(specs, seed):
    """Build a Network with fan-in-scaled zero-mean weights and zero biases.

    Identical seeds give bitwise-identical parameters.
    """
    check_specs(specs)
    rng = np.random.default_rng(seed)
    weights = []
    for spec in specs:
        if spec.kind == "dense":
            scale = 1.0 / np.sqrt(spec.in_dim)
            w = rng.normal(0.0, scale, size=(spec.in_dim, spec.out_dim))
            b = np.zeros(spec.out_dim)
            weights.append((w, b))
        elif spec.kind == "conv2d":
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            scale = 1.0 / np.sqrt(fan_in)
            w = rng.normal(0.0, scale,
                           size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
            b = np.zeros(spec.out_channels)
            weights.append((w, b))
        else:
            weights.append(None)
    return Network(list(specs), weights)


def _layer_forward(spec, params, x, index):
    if spec.kind == "dense":
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise ShapeError(f"dense expects (batch, {spec.in_dim}), got {x.shape}", layer_index=index)
        return x @ params[0] + params[1]
    if spec.kind == "conv2d":
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeError(
                f"conv2d expects (batch, {spec.in_channels}, H, W), got {x.shape}", layer_index=index)
        if x.shape[2] < spec.kernel or x.shape[3] < spec.kernel:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} smaller than kernel {spec.kernel}",
                             layer_index=index)
        return _kernels.conv2d_forward(np.ascontiguousarray(x), params[0], params[1], spec.stride)
    if spec.kind == "relu":
        return np.maximum(x, 0.0)
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if spec.kind == "grl":
        return x
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def forward(net, x, record=False):
    """Run the stack on a batch; optionally record a tape for backward.

    Returns (output, tape) with tape None unless `record`.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"input must be batched (ndim >= 2), got shape {x.shape}")
    saved = [] if record else None
    for i, spec in enumerate(net.specs):
        if record:
            saved.append(x)
        x = _layer_forward(spec, net.weights[i], x, i)
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in forward output")
    tape = Tape(net.uid, net.version, saved, x.shape[0]) if record else None
    return x, tape


def _layer_backward(spec, params, saved_x, gy, index):
    if spec.kind == "dense":
        gx = gy @ params[0].T
        gw = saved_x.T @ gy
        gb = gy.sum(axis=0)
        return gx, (gw, gb)
    if spec.kind == "conv2d":
        gx, gw, gb = _kernels.conv2d_backward(
            np.ascontiguousarray(saved_x), params[0], np.ascontiguousarray(gy), spec.stride)
        return gx, (gw, gb)
    if spec.kind == "relu":
        return gy * (saved_x > 0.0), None
    if spec.kind == "flatten":
        return gy.reshape(saved_x.shape), None
    if spec.kind == "grl":
        return -gy, None
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def backward(net, tape, output_grad):
    """Backpropagate `output_grad` through a recorded forward pass.

    Returns (input_grad, GradientBuffer). Refuses tapes recorded under other
    parameters (different network or different version).
    """
    if tape is None:
        raise ProtocolError("backward requires a tape from forward(record=True)")
    if tape.net_uid != net.uid:
        raise ProtocolError("tape belongs to a different network")
    if tape.version != net.version:
        raise ProtocolError(
            f"stale tape: recorded at version {tape.version}, parameters now at {net.version}")
    gy = as_tensor(output_grad)
    if gy.shape[0] != tape.batch_size:
        raise ShapeError(f"output_grad batch {gy.shape[0]} != tape batch {tape.batch_size}")
    grads = [None] * len(net.specs)
    for i in range(len(net.specs) - 1, -1, -1):
        gy, g = _layer_backward(net.specs[i], net.weights[i], tape.inputs[i], gy, i)
        grads[i] = g
    if not np.isfinite(gy).all():
        raise NumericError("non-finite values in input gradient")
    return gy, GradientBuffer(grads)


def grl_backward(output_grad):
    """Gradient-reversal backward: exact elementwise negation.

    The forward counterpart is the identity, so composing twice restores the
    original gradient.
    """
    return -as_tensor(output_grad)


def sgd_step(net, grads, eta):
    """One SGD step: theta <- theta - eta * grad, elementwise.

    Refuses the whole step (no mutation) if any gradient or updated value is
    non-finite. Bumps the parameter version, invalidating existing tapes.
    """
    if eta <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {eta}")
    per_layer = grads.per_layer if isinstance(grads, GradientBuffer) else grads
    if len(per_layer) != len(net.weights):
        raise ShapeError("gradient layer count mismatch")
    updated = []
    for i, (w, g) in enumerate(zip(net.weights, per_layer)):
        if w is None:
            if g is not None:
                raise ShapeError("gradient present for parameter-free layer", layer_index=i)
            updated.append(None)
            continue
        gw, gb = g
        if gw.shape != w[0].shape or gb.shape != w[1].shape:
            raise ShapeError("gradient shape mismatch", layer_index=i)
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient at layer {i}; step refused")
        new_w = w[0] - eta * gw
        new_b = w[1] - eta * gb
        if not (np.isfinite(new_w).all() and np.isfinite(new_b).all()):
            raise NumericError(f"non-finite parameters after step at layer {i}; step refused")
        updated.append((new_w, new_b))
    net.weights = updated
    net.version += 1
    return net
