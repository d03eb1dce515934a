"""Decoder-only transformer with width-aware scaling.

Every width-dependent quantity follows the scaling rules: embeddings scaled
by ``embeddings_scale``, logits by ``output_alpha * width_scale``, attention
scores divided by the head dimension (not its square root), hidden/output
weights initialized at ``init_std * sqrt(width_scale)``, embeddings at
``init_std``. Blocks are pre-LayerNorm with SwiGLU MLPs and partial rotary
attention. Gradients are computed analytically in :func:`grad`.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import kernels
from .config import ConfigError, ModelConfig, MuPParams


class InputError(ValueError):
    """Invalid model inputs (token ids out of range, shape mismatches)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared; the message identifies the layer."""


class UndefinedLossError(ValueError):
    """Loss requested over zero valid target positions."""


class ParamSet:
    """Named parameter tensors in a fixed canonical order.

    Gradients reuse this container (same names and shapes). Mutation is
    reserved for the optimizer apply step; forward/backward never write to
    an existing ParamSet.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def get(self, name: str, default=None):
        return self.tensors.get(name, default)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def total_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())

    def checksum(self) -> str:
        """Order- and content-sensitive sha256 over all tensors."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = self.tensors[name]
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def save_npz(self, path) -> None:
        np.savez(path, **self.tensors)

    @classmethod
    def load_npz(cls, path) -> "ParamSet":
        with np.load(path) as data:
            return cls({k: data[k] for k in data.files})


# Parameter roles drive optimizer group classification.
ROLE_EMBEDDING = "embedding"
ROLE_NORM_GAIN = "norm_gain"
ROLE_NORM_BIAS = "norm_bias"
ROLE_LINEAR_WEIGHT = "linear_weight"
ROLE_LINEAR_BIAS = "linear_bias"
ROLE_OUTPUT_WEIGHT = "output_weight"
ROLE_OUTPUT_BIAS = "output_bias"


def role_of(name: str) -> str:
    """Map a canonical tensor name to its role."""
    if name == "tok_emb":
        return ROLE_EMBEDDING
    if name == "out_proj.w":
        return ROLE_OUTPUT_WEIGHT
    if name == "out_proj.b":
        return ROLE_OUTPUT_BIAS
    part = name.rsplit(".", 1)[-1]
    if ".ln1." in name or ".ln2." in name or name.startswith("final_norm."):
        if part == "gain":
            return ROLE_NORM_GAIN
        if part == "bias":
            return ROLE_NORM_BIAS
    if part.startswith("w"):
        return ROLE_LINEAR_WEIGHT
    if part.startswith("b"):
        return ROLE_LINEAR_BIAS
    raise KeyError(f"cannot derive role for parameter {name!r}")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in initialization order."""
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        if config.use_bias_norm:
            shapes[f"{p}.ln1.bias"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}"] = (d, d)
            if config.use_bias_linear:
                shapes[f"{p}.attn.b{proj[1]}"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        if config.use_bias_norm:
            shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.mlp.wg"] = (d, f)
        if config.use_bias_linear:
            shapes[f"{p}.mlp.bg"] = (f,)
        shapes[f"{p}.mlp.wu"] = (d, f)
        if config.use_bias_linear:
            shapes[f"{p}.mlp.bu"] = (f,)
        shapes[f"{p}.mlp.wd"] = (f, d)
        if config.use_bias_linear:
            shapes[f"{p}.mlp.bd"] = (d,)
    shapes["final_norm.gain"] = (d,)
    if config.use_bias_norm:
        shapes["final_norm.bias"] = (d,)
    shapes["out_proj.w"] = (d, v)
    if config.use_bias_linear:
        shapes["out_proj.b"] = (v,)
    return shapes


def init_params(config: ModelConfig, mup: MuPParams, seed: int,
                dtype=np.float32) -> ParamSet:
    """Seeded initialization.

    Embedding rows draw at std ``init_std``; hidden and output matrices at
    ``init_std * sqrt(width_scale)``; biases start at zero, norm gains at one.
    Tensors are drawn in canonical order from one generator, so a fixed
    (config, seed, dtype) always produces the same bytes.
    """
    mup.validate_width(config.hidden_dim)
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported parameter dtype {dtype}")
    rng = np.random.default_rng(seed)
    hidden_std = mup.hidden_init_std
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        role = role_of(name)
        if role == ROLE_EMBEDDING:
            t = rng.standard_normal(shape, dtype=dtype) * dtype.type(mup.init_std)
        elif role in (ROLE_LINEAR_WEIGHT, ROLE_OUTPUT_WEIGHT):
            t = rng.standard_normal(shape, dtype=dtype) * dtype.type(hidden_std)
        elif role == ROLE_NORM_GAIN:
            t = np.ones(shape, dtype=dtype)
        else:  # biases of any kind
            t = np.zeros(shape, dtype=dtype)
        tensors[name] = t
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# Rotary rotation on the leading slice of each head
# ---------------------------------------------------------------------------

def rope_tables(config: ModelConfig, positions: np.ndarray, dtype):
    """cos/sin tables [T, rotary_dims/2] for the given positions."""
    half = config.rotary_dims // 2
    j = np.arange(half, dtype=np.float64)
    inv_freq = config.rope_base ** (-2.0 * j / config.rotary_dims)
    theta = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, rotary: int) -> np.ndarray:
    """Rotate the leading ``rotary`` dims of x [B, H, T, head_dim]; the pair
    for index j is (j, j + rotary/2)."""
    half = rotary // 2
    u = x[..., :half]
    w = x[..., half:rotary]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    out = x.copy()
    out[..., :half] = u * c - w * s
    out[..., half:rotary] = u * s + w * c
    return out


def rope_backward(d: np.ndarray, cos: np.ndarray, sin: np.ndarray, rotary: int) -> np.ndarray:
    """Transpose of apply_rope (rotation by the negated angles)."""
    half = rotary // 2
    du = d[..., :half]
    dw = d[..., half:rotary]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    out = d.copy()
    out[..., :half] = du * c + dw * s
    out[..., half:rotary] = dw * c - du * s
    return out


# ---------------------------------------------------------------------------
# Forward / loss / grad
# ---------------------------------------------------------------------------

def _validate_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError(
            f"token ids must be in [0, {config.vocab_size}), "
            f"got range [{tokens.min()}, {tokens.max()}]"
        )
    return tokens.astype(np.int64, copy=False)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def _linear(x, w, b):
    y = x @ w
    if b is not None:
        y += b
    return y


def forward(config: ModelConfig, mup: MuPParams, params: ParamSet,
            tokens: np.ndarray, positions: np.ndarray | None = None,
            trace: dict | None = None, _cache: list | None = None) -> np.ndarray:
    """Compute logits [batch, seq, vocab].

    ``positions`` overrides the rotary position indices (default arange);
    ``trace``, when a dict, collects per-block activation RMS values.
    When ``_cache`` is a list, per-layer intermediates are appended for the
    analytic backward pass.
    """
    tokens = _validate_tokens(config, tokens)
    b, t = tokens.shape
    d, nh, dh = config.hidden_dim, config.n_heads, config.head_dim
    rot = config.rotary_dims
    dtype = params.dtype
    n = b * t

    if positions is None:
        positions = np.arange(t)
    cos, sin = rope_tables(config, np.asarray(positions), dtype)
    inv_scale = dtype.type(config.attention_inv_scale)
    emb_scale = dtype.type(mup.embeddings_scale)

    x = params["tok_emb"][tokens.reshape(-1)] * emb_scale  # [N, D]
    if trace is not None:
        trace["emb"] = _rms(x)

    for i in range(config.n_layers):
        p = f"layers.{i}"
        g1, b1 = params[f"{p}.ln1.gain"], params.get(f"{p}.ln1.bias")
        n1, mean1, rstd1 = kernels.layernorm_forward(x, g1, b1, config.norm_eps)

        q = _linear(n1, params[f"{p}.attn.wq"], params.get(f"{p}.attn.bq"))
        k = _linear(n1, params[f"{p}.attn.wk"], params.get(f"{p}.attn.bk"))
        v = _linear(n1, params[f"{p}.attn.wv"], params.get(f"{p}.attn.bv"))
        # [N, D] -> [B, H, T, dh]
        q4 = q.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        k4 = k.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        v4 = np.ascontiguousarray(v.reshape(b, t, nh, dh).transpose(0, 2, 1, 3))
        q4 = apply_rope(q4, cos, sin, rot)
        k4 = apply_rope(k4, cos, sin, rot)

        scores = np.matmul(q4, k4.transpose(0, 1, 3, 2)) * inv_scale
        if trace is not None:
            tri = np.tril_indices(t)
            trace[f"layer{i}.attn_scores"] = _rms(scores[..., tri[0], tri[1]])
        probs = kernels.causal_softmax(scores.reshape(b * nh, t, t)).reshape(b, nh, t, t)
        ctx = np.matmul(probs, v4)  # [B, H, T, dh]
        ctx2 = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(n, d)
        attn_out = _linear(ctx2, params[f"{p}.attn.wo"], params.get(f"{p}.attn.bo"))
        if trace is not None:
            trace[f"layer{i}.attn_out"] = _rms(attn_out)
        x_mid = x + attn_out

        g2, b2 = params[f"{p}.ln2.gain"], params.get(f"{p}.ln2.bias")
        n2, mean2, rstd2 = kernels.layernorm_forward(x_mid, g2, b2, config.norm_eps)
        gate = _linear(n2, params[f"{p}.mlp.wg"], params.get(f"{p}.mlp.bg"))
        up = _linear(n2, params[f"{p}.mlp.wu"], params.get(f"{p}.mlp.bu"))
        act = kernels.silu_mul_forward(gate, up)
        mlp_out = _linear(act, params[f"{p}.mlp.wd"], params.get(f"{p}.mlp.bd"))
        if trace is not None:
            trace[f"layer{i}.mlp_out"] = _rms(mlp_out)
        x_out = x_mid + mlp_out

        if _cache is not None:
            _cache.append({
                "x_in": x, "n1": n1, "mean1": mean1, "rstd1": rstd1,
                "q4": q4, "k4": k4, "v4": v4, "probs": probs, "ctx2": ctx2,
                "x_mid": x_mid, "n2": n2, "mean2": mean2, "rstd2": rstd2,
                "gate": gate, "up": up, "act": act,
            })
        x = x_out

    gf, bf = params["final_norm.gain"], params.get("final_norm.bias")
    nf, meanf, rstdf = kernels.layernorm_forward(x, gf, bf, config.norm_eps)
    logit_scale = dtype.type(mup.logit_scale)
    logits = _linear(nf, params["out_proj.w"], params.get("out_proj.b")) * logit_scale
    if trace is not None:
        trace["logits"] = _rms(logits)
    if _cache is not None:
        _cache.append({
            "x_final": x, "nf": nf, "meanf": meanf, "rstdf": rstdf,
            "tokens": tokens, "cos": cos, "sin": sin,
        })
    return logits.reshape(b, t, config.vocab_size)


def loss(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1) -> float:
    """Mean next-token cross-entropy in nats over non-ignored positions."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise InputError(
            f"targets shape {targets.shape} does not match logits {logits.shape[:-1]}"
        )
    v = logits.shape[-1]
    loss_sum, n_valid, _ = kernels.softmax_xent(
        np.ascontiguousarray(logits.reshape(-1, v)),
        targets.reshape(-1).astype(np.int64),
        ignore_index,
    )
    if n_valid == 0:
        raise UndefinedLossError("all target positions are ignored; loss undefined")
    return loss_sum / n_valid


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {where}")


def grad(config: ModelConfig, mup: MuPParams, params: ParamSet,
         tokens: np.ndarray, targets: np.ndarray,
         positions: np.ndarray | None = None,
         ignore_index: int = -1, trace: dict | None = None) -> tuple[float, ParamSet]:
    """Analytic gradients of the mean cross-entropy w.r.t. every parameter.

    Returns (loss_value, grads). Raises :class:`NumericError`, naming the
    offending layer, if a non-finite value appears.
    """
    tokens = _validate_tokens(config, tokens)
    targets = np.asarray(targets)
    b, t = tokens.shape
    d, nh, dh = config.hidden_dim, config.n_heads, config.head_dim
    rot = config.rotary_dims
    n = b * t
    dtype = params.dtype
    inv_scale = dtype.type(config.attention_inv_scale)

    cache: list = []
    logits = forward(config, mup, params, tokens, positions=positions,
                     trace=trace, _cache=cache)
    tail = cache.pop()
    cos, sin = tail["cos"], tail["sin"]

    vsz = config.vocab_size
    loss_sum, n_valid, dlogits = kernels.softmax_xent(
        np.ascontiguousarray(logits.reshape(n, vsz)),
        targets.reshape(-1).astype(np.int64),
        ignore_index,
    )
    if n_valid == 0:
        raise UndefinedLossError("all target positions are ignored; loss undefined")
    loss_value = loss_sum / n_valid
    if not np.isfinite(loss_value):
        raise NumericError("non-finite loss from output logits")

    grads: dict[str, np.ndarray] = {}
    logit_scale = dtype.type(mup.logit_scale)
    dpre = dlogits * (logit_scale / dtype.type(n_valid))

    nf = tail["nf"]
    grads["out_proj.w"] = nf.T @ dpre
    if "out_proj.b" in params:
        grads["out_proj.b"] = dpre.sum(axis=0)
    dnf = dpre @ params["out_proj.w"].T
    dx, dgain, dbias = kernels.layernorm_backward(
        dnf, tail["x_final"], params["final_norm.gain"], tail["meanf"], tail["rstdf"])
    grads["final_norm.gain"] = dgain
    if "final_norm.bias" in params:
        grads["final_norm.bias"] = dbias

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}"
        c = cache[i]
        # MLP branch: x_out = x_mid + wd(act); act = silu(gate) * up
        dmlp_out = dx
        grads[f"{p}.mlp.wd"] = c["act"].T @ dmlp_out
        if f"{p}.mlp.bd" in params:
            grads[f"{p}.mlp.bd"] = dmlp_out.sum(axis=0)
        dact = dmlp_out @ params[f"{p}.mlp.wd"].T
        dgate, dup = kernels.silu_mul_backward(dact, c["gate"], c["up"])
        grads[f"{p}.mlp.wg"] = c["n2"].T @ dgate
        grads[f"{p}.mlp.wu"] = c["n2"].T @ dup
        if f"{p}.mlp.bg" in params:
            grads[f"{p}.mlp.bg"] = dgate.sum(axis=0)
            grads[f"{p}.mlp.bu"] = dup.sum(axis=0)
        dn2 = dgate @ params[f"{p}.mlp.wg"].T + dup @ params[f"{p}.mlp.wu"].T
        dx_mid_ln, dgain2, dbias2 = kernels.layernorm_backward(
            dn2, c["x_mid"], params[f"{p}.ln2.gain"], c["mean2"], c["rstd2"])
        grads[f"{p}.ln2.gain"] = dgain2
        if f"{p}.ln2.bias" in params:
            grads[f"{p}.ln2.bias"] = dbias2
        dx_mid = dx + dx_mid_ln

        # Attention branch: x_mid = x_in + wo(ctx)
        dattn_out = dx_mid
        grads[f"{p}.attn.wo"] = c["ctx2"].T @ dattn_out
        if f"{p}.attn.bo" in params:
            grads[f"{p}.attn.bo"] = dattn_out.sum(axis=0)
        dctx2 = dattn_out @ params[f"{p}.attn.wo"].T
        dctx = np.ascontiguousarray(
            dctx2.reshape(b, t, nh, dh).transpose(0, 2, 1, 3))
        probs, v4 = c["probs"], c["v4"]
        dprobs = np.matmul(dctx, v4.transpose(0, 1, 3, 2))
        dv4 = np.matmul(probs.transpose(0, 1, 3, 2), dctx)
        dscores = kernels.causal_softmax_backward(
            np.ascontiguousarray(dprobs.reshape(b * nh, t, t)),
            np.ascontiguousarray(probs.reshape(b * nh, t, t)),
        ).reshape(b, nh, t, t)
        q4, k4 = c["q4"], c["k4"]
        dq4 = np.matmul(dscores, k4) * inv_scale
        dk4 = np.matmul(dscores.transpose(0, 1, 3, 2), q4) * inv_scale
        dq4 = rope_backward(dq4, cos, sin, rot)
        dk4 = rope_backward(dk4, cos, sin, rot)
        dq = np.ascontiguousarray(dq4.transpose(0, 2, 1, 3)).reshape(n, d)
        dk = np.ascontiguousarray(dk4.transpose(0, 2, 1, 3)).reshape(n, d)
        dv = np.ascontiguousarray(dv4.transpose(0, 2, 1, 3)).reshape(n, d)
        n1 = c["n1"]
        grads[f"{p}.attn.wq"] = n1.T @ dq
        grads[f"{p}.attn.wk"] = n1.T @ dk
        grads[f"{p}.attn.wv"] = n1.T @ dv
        if f"{p}.attn.bq" in params:
            grads[f"{p}.attn.bq"] = dq.sum(axis=0)
            grads[f"{p}.attn.bk"] = dk.sum(axis=0)
            grads[f"{p}.attn.bv"] = dv.sum(axis=0)
        dn1 = (dq @ params[f"{p}.attn.wq"].T
               + dk @ params[f"{p}.attn.wk"].T
               + dv @ params[f"{p}.attn.wv"].T)
        dx_in_ln, dgain1, dbias1 = kernels.layernorm_backward(
            dn1, c["x_in"], params[f"{p}.ln1.gain"], c["mean1"], c["rstd1"])
        grads[f"{p}.ln1.gain"] = dgain1
        if f"{p}.ln1.bias" in params:
            grads[f"{p}.ln1.bias"] = dbias1
        dx = dx_mid + dx_in_ln
        _check_finite(dx, f"backward of layer {i}")

    emb_scale = dtype.type(mup.embeddings_scale)
    demb = np.zeros_like(params["tok_emb"])
    np.add.at(demb, tokens.reshape(-1), dx * emb_scale)
    grads["tok_emb"] = demb

    out = ParamSet({name: grads[name] for name in params.names()})
    if not out.all_finite():
        bad = [k for k, g in out.items() if not np.isfinite(g).all()]
        raise NumericError(f"non-finite gradient in {bad[0]}")
    return loss_value, out
