import numpy as np
import pytest

from ftrobust import _pykernels as py
from ftrobust import kernels

compiled = pytest.mark.skipif(kernels.compiled is None, reason="extension not built")


@compiled
def test_backend_selected():
    assert kernels.BACKEND == "compiled"


@compiled
def test_gelu_equivalent():
    x = np.random.default_rng(0).standard_normal((50, 40)) * 4
    for a, b in zip(kernels.compiled.gelu_fwd(x), py.gelu_fwd(x)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


@compiled
def test_layer_norm_equivalent():
    rng = np.random.default_rng(1)
    x, g, b = rng.standard_normal((30, 12)), rng.standard_normal(12), rng.standard_normal(12)
    fc, fp = kernels.compiled.layer_norm_fwd(x, g, b, 1e-5), py.layer_norm_fwd(x, g, b, 1e-5)
    for a, c in zip(fc, fp):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-13)
    up = rng.standard_normal((30, 12))
    for a, c in zip(kernels.compiled.layer_norm_bwd(up, fc[1], fc[2], g), py.layer_norm_bwd(up, fp[1], fp[2], g)):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)


@compiled
def test_mc_counts_identical():
    w = np.r_[0.0, np.full(30, 1 / 30)]
    a = kernels.compiled.gaussian_linear_mc(np.random.default_rng(7), w, 0.3, 0.95, 70_000, 65536)
    b = py.gaussian_linear_mc(np.random.default_rng(7), w, 0.3, 0.95, 70_000, 65536)
    assert a == b


@compiled
def test_pareto_and_auc_equivalent():
    rng = np.random.default_rng(2)
    acc, rob = rng.random(300), rng.random(300)
    acc[:20] = acc[20:40]  # ties
    np.testing.assert_array_equal(kernels.compiled.pareto_mask(acc, rob), py.pareto_mask(acc, rob))
    a, r = np.sort(rng.random(20)), np.sort(rng.random(20))[::-1].copy()
    assert kernels.compiled.frontier_auc(a, r) == pytest.approx(py.frontier_auc(a, r), rel=1e-14)


def test_pure_python_switch(tmp_path):
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "from ftrobust import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env={"FTROBUST_PURE_PYTHON": "1", "PATH": ""})
    assert out.stdout.strip() == "python"
