"""Compiled kernels against their numpy twins.

Per-kernel timings call both modules directly. The end-to-end rows run a
training step batch and a t-SNE fit in a child process, once per backend,
with ``XPTLAB_PURE_PYTHON`` selecting the fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from xptlab import _kernels_py as py

try:
    from xptlab import _kernels as cy
except ImportError:
    cy = None


def kernel_cases(rng: np.random.Generator) -> dict:
    x = rng.normal(size=(32 * 40, 64)).astype(np.float32)
    gain, bias = np.ones(64, np.float32), np.zeros(64, np.float32)
    scores = rng.normal(size=(32 * 4 * 40, 56)).astype(np.float32)
    keep = np.ones((32, 56), np.uint8)
    keep[:, 50:] = 0
    n = 750
    pts = rng.normal(size=(n, 2))
    P = rng.random((n, n))
    P = P + P.T
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    d2 = rng.random((n, n)) * 10
    d2 = d2 + d2.T
    np.fill_diagonal(d2, 0.0)
    X2 = rng.normal(size=(1000, 2))
    y2 = (X2[:, 0] + 0.5 * rng.normal(size=1000) > 0).astype(np.float64)
    p = rng.normal(size=200_000)
    g = rng.normal(size=200_000).astype(np.float32)
    return {
        "gelu_fwd": lambda K: K.gelu_fwd(x.reshape(-1)),
        "layer_norm_fwd": lambda K: K.layer_norm_fwd(x, gain, bias, 1e-5),
        "softmax_rows": lambda K: K.softmax_rows(scores, keep, 4 * 40),
        "perplexity_search": lambda K: K.perplexity_search(d2, np.log(30.0), 1e-5 / 30.0, 50),
        "tsne_gradient": lambda K: K.tsne_gradient(P, pts, 1.0, False),
        "logistic_gd": lambda K: K.logistic_gd(X2, y2, 1e-3, 1e-3, 1.0, 1e-10, 2000),
        "adam_update": lambda K: K.adam_update(p, g, np.zeros_like(p), np.zeros_like(p),
                                               1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8),
    }


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def end_to_end() -> dict:
    """Timings of one desk-size training batch (forward and backward) and one t-SNE fit."""
    from xptlab import kernels
    from xptlab import tensor as T
    from xptlab.encoder import EncoderParams, ModelConfig
    from xptlab.projection import TsneConfig, run_tsne
    from xptlab.tuning import _logits

    cfg = ModelConfig()
    params = EncoderParams.init(cfg, 0)
    rng = np.random.default_rng(0)
    tokens = rng.integers(cfg.n_special, cfg.vocab_size, size=(32, 24))
    tokens[:, 0] = cfg.cls_token_id
    labels = rng.integers(0, 2, 32)

    def step():
        with T.precision(np.float32):
            tape = T.Tape()
            w = {n: tape.watch(v) for n, v in params.arrays.items()}
            T.backward(T.cross_entropy_logits(_logits(w, cfg, tokens, None), labels))

    X = np.vstack([rng.normal(size=(125, 64)) + 8 * rng.normal(size=64) for _ in range(4)])
    tcfg = TsneConfig(iterations=300, exaggeration_iters=100)
    return {"backend": kernels.BACKEND,
            "train_batch": best_of(step, 5),
            "tsne_500x300": best_of(lambda: run_tsne(X, tcfg), 1)}


def run_child(pure: bool) -> dict:
    env = dict(os.environ)
    env.pop("XPTLAB_PURE_PYTHON", None)
    if pure:
        env["XPTLAB_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, __file__, "--child"], env=env, check=True,
                         capture_output=True, text=True).stdout
    return json.loads(out)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(end_to_end()))
        return
    if cy is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, call in kernel_cases(rng).items():
        t_py = best_of(lambda: call(py), args.repeat)
        t_cy = best_of(lambda: call(cy), args.repeat)
        print(f"{name:<20}{1e3 * t_py:>12.2f}{1e3 * t_cy:>14.2f}{t_py / t_cy:>9.1f}x")

    fast, slow = run_child(False), run_child(True)
    assert fast["backend"] == "compiled" and slow["backend"] == "python"
    print()
    print(f"{'end to end':<20}{'numpy s':>12}{'compiled s':>14}{'speedup':>10}")
    for key in ("train_batch", "tsne_500x300"):
        print(f"{key:<20}{slow[key]:>12.3f}{fast[key]:>14.3f}{slow[key] / fast[key]:>9.1f}x")


if __name__ == "__main__":
    main()
