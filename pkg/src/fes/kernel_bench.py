"""Timing of the compiled training kernels against the numpy fallback."""

from __future__ import annotations

import time
from typing import Dict, List, Sequence

import numpy as np

from . import _kernels
from .neuralreg import init_params


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_sgd(backend: str, n_inputs: int, n_samples: int = 150, hidden=(32, 16), batch: int = 1, repeats: int = 3) -> float:
    """Seconds for one stage-1 style epoch."""
    k = _kernels.backend(backend)
    rng = np.random.default_rng(0)
    sizes = np.array((n_inputs,) + tuple(hidden) + (1,), dtype=np.intp)
    params = init_params(sizes, rng)
    velocity = np.zeros_like(params)
    X = rng.random((n_samples, n_inputs))
    y = rng.random(n_samples)
    order = np.arange(n_samples, dtype=np.intp)
    return _best_of(lambda: k.sgd_epoch(sizes, params, velocity, X, y, order, batch, 0.01, 0.9), repeats)


def time_mf(backend: str, shape=(150, 1000), density: float = 0.1, rank: int = 10, repeats: int = 3) -> float:
    """Seconds for one factorisation epoch over the observed cells."""
    k = _kernels.backend(backend)
    rng = np.random.default_rng(0)
    mask = rng.random(shape) < density
    rows, cols = (a.astype(np.intp) for a in np.nonzero(mask))
    vals = rng.random(rows.size)
    P = rng.uniform(0, 0.1, (shape[0], rank))
    Q = rng.uniform(0, 0.1, (shape[1], rank))
    order = rng.permutation(rows.size).astype(np.intp)
    return _best_of(lambda: k.mf_epoch(rows, cols, vals, P, Q, order, 0.005, 0.01), repeats)


def compare(n_inputs: Sequence[int] = (100, 400, 1000), repeats: int = 3) -> List[Dict[str, object]]:
    names = _kernels.available()
    rows = []
    for n in n_inputs:
        rec = {"kernel": "sgd_epoch", "size": f"150x{n}"}
        for name in names:
            rec[name] = time_sgd(name, n, repeats=repeats)
        rows.append(rec)
    rec = {"kernel": "mf_epoch", "size": "150x1000@0.1"}
    for name in names:
        rec[name] = time_mf(name, repeats=repeats)
    rows.append(rec)
    for r in rows:
        if "cython" in r:
            r["speedup"] = r["python"] / r["cython"]
    return rows


def main() -> None:
    for r in compare():
        cells = [f"{r['kernel']:<10} {r['size']:<14}"]
        for name in ("cython", "python"):
            if name in r:
                cells.append(f"{name} {r[name] * 1e3:9.2f} ms")
        if "speedup" in r:
            cells.append(f"speedup {r['speedup']:6.1f}x")
        print("  ".join(cells))


if __name__ == "__main__":
    main()
