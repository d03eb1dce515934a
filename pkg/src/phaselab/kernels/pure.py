"""Pure numpy implementations of the hot-loop kernels.

This is the fallback backend; the compiled extension in ``_fused`` implements
the same signatures. Reductions accumulate in float64 regardless of the
working dtype so both backends agree closely.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def layernorm_forward(x, gain, bias, eps):
    """x: [N, D]. Returns (y, mean, rstd) with mean/rstd in x.dtype, shape [N]."""
    mean = x.mean(axis=1, dtype=np.float64)
    var = np.square(x - mean[:, None]).mean(axis=1, dtype=np.float64)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None].astype(x.dtype)) * rstd[:, None].astype(x.dtype)
    y = xhat * gain
    if bias is not None:
        y = y + bias
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype), rstd.astype(x.dtype)


def layernorm_backward(dy, x, gain, mean, rstd):
    """Returns (dx, dgain, dbias). dbias is always computed; caller may discard."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0, dtype=np.float64).astype(x.dtype)
    dbias = dy.sum(axis=0, dtype=np.float64).astype(x.dtype)
    dxhat = dy * gain
    d = x.shape[1]
    m1 = dxhat.mean(axis=1, dtype=np.float64)[:, None].astype(x.dtype)
    m2 = (dxhat * xhat).mean(axis=1, dtype=np.float64)[:, None].astype(x.dtype)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx.astype(x.dtype, copy=False), dgain, dbias


def causal_softmax(scores):
    """scores: [N, T, T]. Row-wise softmax over columns j <= i; zeros above
    the diagonal. Returns a new array."""
    t = scores.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    shifted = np.where(mask, -np.inf, scores)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e[..., mask] = 0.0
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs.astype(scores.dtype, copy=False)


def causal_softmax_backward(dprobs, probs):
    """Backward of causal_softmax: ds = p * (dp - sum_j dp_j p_j)."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return (probs * (dprobs - inner)).astype(probs.dtype, copy=False)


def softmax_xent(logits, targets, ignore_index=-1):
    """Fused softmax cross-entropy over rows.

    logits: [N, V]; targets: int64 [N], rows with ``ignore_index`` excluded.
    Returns (loss_sum, n_valid, dlogits) where loss_sum is the float64 sum of
    per-row negative log-likelihoods and dlogits holds softmax - onehot for
    valid rows, zeros for ignored rows (gradient of the SUM, not the mean).
    """
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True, dtype=np.float64)
    probs = e / z
    dlogits = probs.astype(logits.dtype, copy=True)
    loss_sum = 0.0
    if n_valid:
        rows = np.nonzero(valid)[0]
        tgt = targets[rows]
        logz = np.log(z[rows, 0]) + m[rows, 0].astype(np.float64)
        loss_sum = float((logz - logits[rows, tgt].astype(np.float64)).sum())
        dlogits[rows, tgt] -= 1.0
    dlogits[~valid] = 0.0
    return loss_sum, n_valid, dlogits


def silu_mul_forward(gate, up):
    """SwiGLU activation: silu(gate) * up."""
    sig = 1.0 / (1.0 + np.exp(-gate))
    return (gate * sig * up).astype(gate.dtype, copy=False)


def silu_mul_backward(dout, gate, up):
    sig = 1.0 / (1.0 + np.exp(-gate))
    silu = gate * sig
    dgate = dout * up * (sig * (1.0 + gate * (1.0 - sig)))
    dup = dout * silu
    return dgate.astype(gate.dtype, copy=False), dup.astype(gate.dtype, copy=False)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place AdamW step on flat views. ``bc1``/``bc2`` are the bias
    corrections 1 - beta^t. Decoupled weight decay is scaled by ``lr``."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    mhat = m / bc1
    vhat = v / bc2
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
