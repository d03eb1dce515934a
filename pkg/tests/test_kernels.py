"""Backend parity: the compiled kernels must agree with the pure numpy
reference on every operation, for both working dtypes."""

import numpy as np
import pytest

from phaselab import kernels
from phaselab.kernels import pure

compiled = pytest.importorskip(
    "phaselab.kernels._fused",
    reason="compiled kernel extension not built; pure backend in use")

RTOL = {np.float32: 2e-5, np.float64: 1e-12}
ATOL = {np.float32: 2e-6, np.float64: 1e-13}


def close(a, b, dtype):
    np.testing.assert_allclose(a, b, rtol=RTOL[dtype], atol=ATOL[dtype])


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_backend_reports_name():
    assert kernels.BACKEND in ("python", "compiled")
    assert compiled.NAME == "compiled"
    assert pure.NAME == "python"


def test_layernorm_forward_parity(rng, dtype):
    x = rng.normal(size=(37, 24)).astype(dtype)
    gain = rng.normal(size=24).astype(dtype)
    bias = rng.normal(size=24).astype(dtype)
    for b in (bias, None):
        y1, m1, r1 = pure.layernorm_forward(x, gain, b, 1e-5)
        y2, m2, r2 = compiled.layernorm_forward(x, gain, b, 1e-5)
        close(y1, y2, dtype)
        close(m1, m2, dtype)
        close(r1, r2, dtype)
        assert y2.dtype == dtype


def test_layernorm_backward_parity(rng, dtype):
    x = rng.normal(size=(19, 16)).astype(dtype)
    gain = rng.normal(size=16).astype(dtype)
    dy = rng.normal(size=(19, 16)).astype(dtype)
    _, mean, rstd = pure.layernorm_forward(x, gain, None, 1e-5)
    dx1, dg1, db1 = pure.layernorm_backward(dy, x, gain, mean, rstd)
    dx2, dg2, db2 = compiled.layernorm_backward(dy, x, gain, mean, rstd)
    close(dx1, dx2, dtype)
    close(dg1, dg2, dtype)
    close(db1, db2, dtype)


def test_causal_softmax_parity(rng, dtype):
    scores = rng.normal(size=(6, 11, 11)).astype(dtype) * 3
    p1 = pure.causal_softmax(scores)
    p2 = compiled.causal_softmax(scores)
    close(p1, p2, dtype)
    # rows over the causal support sum to one; strict upper triangle is zero
    t = scores.shape[-1]
    for i in range(t):
        np.testing.assert_allclose(p2[:, i, :i + 1].sum(-1), 1.0,
                                   rtol=RTOL[dtype])
        assert np.all(p2[:, i, i + 1:] == 0.0)


def test_causal_softmax_backward_parity(rng, dtype):
    scores = rng.normal(size=(5, 9, 9)).astype(dtype)
    dprobs = rng.normal(size=(5, 9, 9)).astype(dtype)
    probs = pure.causal_softmax(scores)
    d1 = pure.causal_softmax_backward(dprobs, probs)
    d2 = compiled.causal_softmax_backward(dprobs.copy(), probs.copy())
    close(d1, d2, dtype)


def test_softmax_xent_parity(rng, dtype):
    logits = (rng.normal(size=(40, 33)) * 4).astype(dtype)
    targets = rng.integers(0, 33, size=40).astype(np.int64)
    targets[[3, 17]] = -1
    l1, n1, d1 = pure.softmax_xent(logits, targets, -1)
    l2, n2, d2 = compiled.softmax_xent(logits, targets, -1)
    assert n1 == n2
    assert l1 == pytest.approx(l2, rel=1e-7 if dtype == np.float32 else 1e-12)
    close(d1, d2, dtype)
    assert np.all(d2[3] == 0.0) and np.all(d2[17] == 0.0)


def test_silu_mul_parity(rng, dtype):
    gate = rng.normal(size=(23, 17)).astype(dtype) * 2
    up = rng.normal(size=(23, 17)).astype(dtype)
    dout = rng.normal(size=(23, 17)).astype(dtype)
    close(pure.silu_mul_forward(gate, up),
          compiled.silu_mul_forward(gate, up), dtype)
    dg1, du1 = pure.silu_mul_backward(dout, gate, up)
    dg2, du2 = compiled.silu_mul_backward(dout, gate, up)
    close(dg1, dg2, dtype)
    close(du1, du2, dtype)


def test_adamw_update_parity(rng, dtype):
    n = 301
    p1 = rng.normal(size=n).astype(dtype)
    g = rng.normal(size=n).astype(dtype)
    m1 = rng.normal(size=n).astype(dtype) * 0.01
    v1 = np.abs(rng.normal(size=n)).astype(dtype) * 0.01
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    args = (0.01, 0.9, 0.95, 1e-9, 0.1, 1 - 0.9 ** 3, 1 - 0.95 ** 3)
    pure.adamw_update(p1, g, m1, v1, *args)
    compiled.adamw_update(p2, g, m2, v2, *args)
    close(p1, p2, dtype)
    close(m1, m2, dtype)
    close(v1, v2, dtype)


def test_full_model_forward_backward_parity():
    """End to end: gradients computed under both backends agree."""
    from phaselab.config import ModelConfig, MuPParams
    from phaselab.model import grad, init_params
    import importlib
    import phaselab.kernels as kmod
    import phaselab.model as mmod

    config = ModelConfig(n_layers=2, hidden_dim=16, n_heads=2, vocab_size=64,
                         seq_len=12, rotary_fraction=0.5)
    mup = MuPParams.for_width(16, base_width=16)
    params = init_params(config, mup, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 64, size=(2, 12))
    targets = np.roll(tokens, -1, axis=1)
    targets[:, -1] = -1

    results = {}
    for backend in (pure, compiled):
        for name in ("layernorm_forward", "layernorm_backward", "causal_softmax",
                     "causal_softmax_backward", "softmax_xent",
                     "silu_mul_forward", "silu_mul_backward", "adamw_update"):
            setattr(kmod, name, getattr(backend, name))
        loss, grads = mmod.grad(config, mup, params, tokens, targets)
        results[backend.NAME] = (loss, grads)
    importlib.reload(kmod)

    l_py, g_py = results["python"]
    l_cy, g_cy = results["compiled"]
    assert l_py == pytest.approx(l_cy, rel=1e-12)
    for name in g_py.names():
        np.testing.assert_allclose(g_py[name], g_cy[name], rtol=1e-10, atol=1e-12)
