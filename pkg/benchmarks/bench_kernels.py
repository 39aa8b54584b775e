"""Benchmark: compiled convolution lane vs the numpy fallback.

Times the hot kernels (conv2d forward/backward) and one full federated
round under each lane. Run from the repo root:

    python benchmarks/bench_kernels.py
"""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from aftl._kernels import pykernels

try:
    from aftl._kernels import _native
    LANES = [("native", _native), ("python", pykernels)]
except ImportError:
    _native = None
    LANES = [("python", pykernels)]


def time_call(fn, repeats=20):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels():
    rng = np.random.default_rng(0)
    cases = [
        ("headline batch 100", (100, 1, 28, 28), (8, 1, 5, 5), 2),
        ("eval batch 1000", (1000, 1, 28, 28), (8, 1, 5, 5), 2),
        ("dense kernel 3x3", (128, 4, 16, 16), (8, 4, 3, 3), 1),
    ]
    print(f"{'case':22s} {'lane':8s} {'forward':>10s} {'backward':>10s}")
    for name, xshape, wshape, stride in cases:
        x = rng.normal(size=xshape)
        w = rng.normal(size=wshape)
        b = rng.normal(size=wshape[0])
        baselines = {}
        for lane, impl in LANES:
            y = impl.conv2d_forward(x, w, b, stride)
            gy = rng.normal(size=y.shape)
            fwd = time_call(lambda: impl.conv2d_forward(x, w, b, stride))
            bwd = time_call(lambda: impl.conv2d_backward(x, w, gy, stride))
            baselines[lane] = (fwd, bwd)
            print(f"{name:22s} {lane:8s} {fwd * 1e3:9.2f}ms {bwd * 1e3:9.2f}ms")
        if len(baselines) == 2:
            f_ratio = baselines["python"][0] / baselines["native"][0]
            b_ratio = baselines["python"][1] / baselines["native"][1]
            print(f"{'':22s} {'speedup':8s} {f_ratio:9.2f}x {b_ratio:9.2f}x")
    if _native is not None:
        x = rng.normal(size=(16, 2, 12, 12))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        ours = _native.conv2d_forward(x, w, b, 1)
        ref = pykernels.conv2d_forward(x, w, b, 1)
        print(f"\nlane agreement (max abs diff): {np.abs(ours - ref).max():.2e}")


def bench_round():
    import synthdata
    from aftl.config import ExperimentConfig
    from aftl.experiment import build_federation
    from aftl.federation import run_initialization, run_round

    pool = synthdata.template_digits(4000, seed=0, size=28, classes=10)
    from aftl.datasets import PartitionPlan, partition
    plan = PartitionPlan(tuple([300] * 10), 500, 500, seed=0)
    shards, t_train, t_test = partition(pool, plan)
    cfg = ExperimentConfig(clients=10, samples_per_client=300, init_epochs=1, seed=0)
    fed = build_federation(shards, t_train, t_test, cfg)
    run_initialization(fed)
    run_round(fed)  # warm up
    best = time_call(lambda: run_round(fed), repeats=5)
    from aftl import kernel_backend
    print(f"\nfull federated round ({kernel_backend} lane): {best * 1e3:.1f}ms")


if __name__ == "__main__":
    print("conv2d kernel lanes\n" + "=" * 55)
    bench_kernels()
    bench_round()
