"""Benchmark the compiled kernels against the numpy reference.

Times each hot kernel at training-realistic shapes and the end-to-end
single-critique path on both backends. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--batch 128] [--items 4000]
"""

import argparse
import statistics
import subprocess
import sys
import time

import numpy as np

from critiq.kernels import numpy_ref

try:
    from critiq.kernels import _native
except ImportError:
    _native = None


def _time(fn, repeats=30):
    samples = []
    fn()  # warm up
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples) * 1e3


def _random_rows(rng, n_rows, n_cols, per_row):
    indices = []
    indptr = [0]
    for _ in range(n_rows):
        k = int(rng.integers(1, per_row + 1))
        indices.extend(np.sort(rng.choice(n_cols, size=k, replace=False)).tolist())
        indptr.append(len(indices))
    return np.asarray(indices, np.int64), np.asarray(indptr, np.int64)


def bench_kernels(batch, items):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(batch, items)).astype(np.float32)
    indices, indptr = _random_rows(rng, batch, items, 40)
    s0 = rng.normal(size=(batch, items)).astype(np.float32)
    s1 = rng.normal(size=(batch, items)).astype(np.float32)
    plus_i, plus_p = _random_rows(rng, batch, items, 60)
    minus_i, minus_p = _random_rows(rng, batch, items, 200)
    acts = np.tanh(rng.normal(size=(batch, 600))).astype(np.float32)
    ups = rng.normal(size=(batch, 600)).astype(np.float32)
    n_params = 1_000_000
    adam_state = {
        name: np.zeros(n_params, np.float32) for name in ("m", "v", "vhat")
    }
    param = rng.normal(size=n_params).astype(np.float32)
    grad = rng.normal(size=n_params).astype(np.float32)

    cases = {
        "scatter_normalized_rows": lambda mod: mod.scatter_normalized_rows(
            indices, indptr, items),
        "multinomial_nll_grad": lambda mod: mod.multinomial_nll_grad(
            logits, indices, indptr),
        "tanh_backward": lambda mod: mod.tanh_backward(acts, ups),
        "hinge_loss_grad": lambda mod: mod.hinge_loss_grad(
            s0, s1, plus_i, plus_p, minus_i, minus_p, 1.0),
        "adam_amsgrad_update": lambda mod: mod.adam_amsgrad_update(
            param, grad, adam_state["m"], adam_state["v"], adam_state["vhat"],
            5, 1e-3, 0.9, 0.999, 1e-8),
    }

    print(f"\nkernels at batch={batch}, items={items} (median ms over 30 runs)")
    print(f"{'kernel':<26} {'numpy':>9} {'native':>9} {'speedup':>8}")
    for name, call in cases.items():
        ref_ms = _time(lambda: call(numpy_ref))
        if _native is None:
            print(f"{name:<26} {ref_ms:>9.3f} {'n/a':>9}")
            continue
        nat_ms = _time(lambda: call(_native))
        print(f"{name:<26} {ref_ms:>9.3f} {nat_ms:>9.3f} {ref_ms / nat_ms:>7.1f}x")


def bench_critique_path(items):
    """End-to-end critique latency per backend, in a subprocess so the
    import-time backend selection takes effect."""
    code = (
        "from critiq.model import MultimodalVae, TrainingConfig\n"
        "from critiq.critiquing import BlendGate\n"
        "from critiq.simulate import latency_probe\n"
        "from critiq.kernels import BACKEND\n"
        f"model = MultimodalVae({items}, 100, TrainingConfig(latent_dim=300))\n"
        "gate = BlendGate(300)\n"
        "stats = latency_probe(model, gate, n_critiques=400, warmup=40)\n"
        "print(f\"{BACKEND}: mean {stats['mean_ms']:.3f} ms, p95 {stats['p95_ms']:.3f} ms\")\n"
    )
    print(f"\nsingle-critique path (latent 300, {items} items, batch 1)")
    for env_extra in ({}, {"CRITIQ_PURE_PY": "1"}):
        import os

        env = dict(os.environ, **env_extra)
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        print(" ", (out.stdout.strip() or out.stderr.strip()))


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--batch", type=int, default=128)
    parser.add_argument("--items", type=int, default=4000)
    args = parser.parse_args()
    bench_kernels(args.batch, args.items)
    bench_critique_path(args.items)
