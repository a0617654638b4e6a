import numpy as np
import pytest

from fes import _kernels
from fes.kernel_bench import compare
from fes.neuralreg import init_params, loss_and_gradient

needs_cython = pytest.mark.skipif("cython" not in _kernels.available(), reason="extension not built")


def sgd_case(seed, n_in=7, hidden=(5, 3), n=23):
    rng = np.random.default_rng(seed)
    sizes = np.array((n_in,) + hidden + (1,), dtype=np.intp)
    params = init_params(sizes, rng)
    return sizes, params, rng.random((n, n_in)), rng.random(n), rng.permutation(n).astype(np.intp)


@needs_cython
@pytest.mark.parametrize("batch", [1, 4, 23, 100])
def test_sgd_backends_agree(batch):
    for seed in range(5):
        sizes, params, X, y, order = sgd_case(seed)
        out = {}
        for name in ("cython", "python"):
            p, v = params.copy(), np.zeros_like(params)
            for _ in range(3):
                _kernels.backend(name).sgd_epoch(sizes, p, v, X, y, order, batch, 0.05, 0.9)
            out[name] = (p, v)
        assert np.max(np.abs(out["cython"][0] - out["python"][0])) < 1e-12
        assert np.max(np.abs(out["cython"][1] - out["python"][1])) < 1e-12


@needs_cython
def test_mf_backends_agree():
    rng = np.random.default_rng(3)
    mask = rng.random((12, 15)) < 0.4
    rows, cols = (a.astype(np.intp) for a in np.nonzero(mask))
    vals = rng.random(rows.size)
    P0, Q0 = rng.uniform(0, 0.1, (12, 4)), rng.uniform(0, 0.1, (15, 4))
    order = rng.permutation(rows.size).astype(np.intp)
    res = []
    for name in ("cython", "python"):
        P, Q = P0.copy(), Q0.copy()
        for _ in range(10):
            _kernels.backend(name).mf_epoch(rows, cols, vals, P, Q, order, 0.05, 0.01)
        res.append((P, Q))
    assert np.max(np.abs(res[0][0] - res[1][0])) < 1e-12
    assert np.max(np.abs(res[0][1] - res[1][1])) < 1e-12


def test_full_batch_step_is_gradient_step():
    sizes, params, X, y, order = sgd_case(9)
    p, v = params.copy(), np.zeros_like(params)
    _kernels.sgd_epoch(sizes, p, v, X, y, order, len(y), 0.1, 0.9)
    _, g = loss_and_gradient(tuple(sizes), params, X, y)
    assert np.allclose(p, params - 0.1 * g, atol=1e-12)


def test_backend_selection():
    assert _kernels.BACKEND in ("cython", "python")
    assert _kernels.backend("python").__name__.endswith("_fallback")
    with pytest.raises(ValueError):
        _kernels.backend("fortran")


def test_pure_python_env(tmp_path):
    import subprocess
    import sys

    code = "from fes import _kernels; print(_kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"FES_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


def test_bench_rows():
    rows = compare(n_inputs=(20,), repeats=1)
    assert [r["kernel"] for r in rows] == ["sgd_epoch", "mf_epoch"]
    assert all(r["python"] > 0 for r in rows)
