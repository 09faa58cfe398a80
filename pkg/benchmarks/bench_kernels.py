"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200]

Each row reports the median wall time per call for both backends and the
speedup of the compiled one. The last row is a full training step's
loss-and-gradient evaluation on a default-size episode (10-way, 4-shot).
"""
import argparse
import statistics
import time

import numpy as np

from openfeat import _kernels
from openfeat.adapter import AdapterParams
from openfeat.bank import GenParams, generate_bank
from openfeat.embedcore import ScoringConfig
from openfeat.episodes import EpisodeConfig, sample_episode
from openfeat.losses import LossConfig, loss_gradients


def median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(dim, n):
    rng = np.random.default_rng(0)
    p = AdapterParams.init(dim, rng=rng)
    X = rng.normal(size=(n, dim))
    mask = (rng.random(X.shape) >= 0.5) * 2.0
    args = (X, p.W_Q, p.W_K, p.W_V, p.W_FC, mask, p.ln_gain, p.ln_bias, 1, 1e-5)
    dY = rng.normal(size=X.shape)
    Z = rng.normal(size=(50, dim))
    P = rng.normal(size=(10, dim))
    targets = np.repeat(np.arange(10), 5).astype(np.int64)
    weights = np.ones(50)

    bank = generate_bank(GenParams(60, 20, dim, 0.2, 6, 0.7, seed=0))
    ep = sample_episode(bank, EpisodeConfig(), np.random.default_rng(1))
    sc, lc = ScoringConfig(), LossConfig()

    def backward():
        _, cache = _kernels.attn_forward(*args)
        return _kernels.attn_backward(cache, dY)

    return {
        f"attn_forward ({n}x{dim})": lambda: _kernels.attn_forward(*args),
        f"attn_forward+backward ({n}x{dim})": backward,
        f"proto_head (50 queries, 10 protos, dim {dim})":
            lambda: _kernels.proto_head(Z, P, 1 / 32, targets, weights),
        "openfeat loss_gradients (episode)": lambda: loss_gradients(ep, p, sc, lc, mask_seed=0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--set-size", type=int, default=70)
    a = ap.parse_args()
    try:
        _kernels.get_backend("cython")
    except ImportError:
        raise SystemExit("compiled backend not built; run `pip install -e . --no-build-isolation`")

    results = {}
    prev = _kernels.BACKEND
    for backend in ("numpy", "cython"):
        _kernels.use_backend(backend)
        for name, fn in cases(a.dim, a.set_size).items():
            results.setdefault(name, {})[backend] = median_time(fn, a.repeat)
    _kernels.use_backend(prev)

    width = max(map(len, results))
    print(f"{'kernel':<{width}}  {'numpy us':>10}  {'cython us':>10}  speedup")
    for name, t in results.items():
        print(f"{name:<{width}}  {1e6 * t['numpy']:10.1f}  {1e6 * t['cython']:10.1f}  "
              f"{t['numpy'] / t['cython']:6.2f}x")


if __name__ == "__main__":
    main()
