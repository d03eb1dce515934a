"""Coordinate check: per-layer activation magnitudes across widths.

Trains matched-seed models at several widths for a few steps and records the
RMS of the embedding output, every block's attention/MLP output, the raw
attention scores, and the logits at each step.

Two kinds of flags:

* band flags: a block output (residual-stream contribution) whose RMS ratio
  between the largest and smallest width leaves the configured band at any
  step. A correctly scaled parameterization keeps these O(1) in width.
* scaling flags: the attention-score RMS at matched-seed initialization must
  shrink like head_dim^-1/2 when scores are divided by the head dimension
  (the q.k sum concentrates over head_dim terms). Dividing by sqrt(head_dim)
  instead makes the measured width exponent ~0, which is flagged per layer.
  Initialization is used because the exponent is exact there; trained score
  magnitudes legitimately drift with learning speed.

Attention-score and logit trajectories stay in the report as diagnostics but
are not band-flagged: logits intentionally shrink with width at init under
the scaled readout, and trained score RMS reflects how fast attention
sharpens, not the parameterization.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, MixtureSpec, ModelConfig, MuPParams, PhaseSpec
from .data import BatchSampler, DataCursor, ingest
from .model import grad, init_params
from .optim import OptimState, adamw_step, build_group_rules
from .synth import ngram_language_docs
from .tokenizer import ByteTokenizer

# Expected init-time width exponent of attention-score RMS under 1/d scaling.
SCORE_EXPONENT = -0.5


@dataclass
class CoordCheckReport:
    widths: list[int]
    steps: int
    band: tuple[float, float]
    slope_tolerance: float
    # metric -> width -> per-step RMS values
    rms: dict[str, dict[int, list[float]]]
    # banded metric -> per-step ratio rms(max width) / rms(min width)
    ratios: dict[str, list[float]] = field(default_factory=dict)
    # score metric -> fitted init-time width exponent
    score_exponents: dict[str, float] = field(default_factory=dict)
    flagged: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flagged

    def to_json(self) -> str:
        doc = dataclasses.asdict(self)
        doc["band"] = list(doc["band"])
        doc["rms"] = {m: {str(w): v for w, v in per.items()}
                      for m, per in doc["rms"].items()}
        return json.dumps(doc, indent=2)


def _matched_configs_check(configs: list[ModelConfig], base_width: int) -> list[int]:
    if not configs:
        raise ConfigError("need at least one config")
    widths = [c.hidden_dim for c in configs]
    if len(set(widths)) != len(widths):
        raise ConfigError("widths must be distinct")
    for c in configs:
        if c.hidden_dim % base_width != 0:
            raise ConfigError(
                f"width {c.hidden_dim} is not a multiple of base width {base_width}")
        ref = dataclasses.replace(configs[0], hidden_dim=c.hidden_dim)
        if ref != c:
            raise ConfigError("configs must differ only in hidden_dim")
    return widths


def _training_batches(vocab_size: int, seq_len: int, batch_size: int, steps: int,
                      seed: int):
    """Deterministic token batches shared by all widths."""
    tok = ByteTokenizer(vocab_size=vocab_size)
    docs = ngram_language_docs(seed, n_docs=max(64, steps * 2))
    shard = ingest(docs, "language", tok, seed=seed)
    sampler = BatchSampler({"language": shard})
    mix = MixtureSpec(weights={"language": 1.0})
    phase = PhaseSpec("phase1", 1, max(2, steps + 1), 1.0, 0.5, batch_size, seq_len)
    cursor = DataCursor.fresh(seed, mix.domains)
    batches = []
    for _ in range(steps):
        batch, cursor = sampler.sample(mix, phase, cursor)
        batches.append(batch)
    return batches


def _is_block_output(metric: str) -> bool:
    return metric == "emb" or metric.endswith(".attn_out") or metric.endswith(".mlp_out")


def coord_check(configs: list[ModelConfig], mup: MuPParams, steps: int,
                *, seed: int = 0, lr: float = 0.002, batch_size: int = 8,
                seq_len: int = 64, band: tuple[float, float] = (0.5, 2.0),
                slope_tolerance: float = 0.25,
                dtype=np.float32) -> CoordCheckReport:
    """Run the check. ``mup`` supplies the width-independent constants; the
    width scale is derived per config from ``mup.base_width``."""
    widths = _matched_configs_check(configs, mup.base_width)
    steps = int(steps)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    batches = _training_batches(configs[0].vocab_size, seq_len, batch_size,
                                steps, seed)

    rms: dict[str, dict[int, list[float]]] = {}
    for config in configs:
        width_mup = MuPParams.for_width(
            config.hidden_dim, base_width=mup.base_width,
            init_std=mup.init_std, embeddings_scale=mup.embeddings_scale,
            output_alpha=mup.output_alpha)
        params = init_params(config, width_mup, seed=seed, dtype=dtype)
        rules = build_group_rules(params, width_mup)
        state = OptimState.init(params)
        for batch in batches:
            trace: dict[str, float] = {}
            _, grads = grad(config, width_mup, params, batch.tokens,
                            batch.targets, trace=trace)
            for metric, value in trace.items():
                rms.setdefault(metric, {}).setdefault(config.hidden_dim, []).append(value)
            params, state = adamw_step(state, params, grads, lr, rules)

    w_min, w_max = min(widths), max(widths)
    ratios: dict[str, list[float]] = {}
    score_exponents: dict[str, float] = {}
    flagged: list[dict] = []
    for metric, per_width in rms.items():
        series = [h / l if l > 0 else float("inf")
                  for h, l in zip(per_width[w_max], per_width[w_min])]
        ratios[metric] = series
        if _is_block_output(metric) and len(widths) > 1:
            for step_idx, ratio in enumerate(series):
                if not (band[0] <= ratio <= band[1]):
                    flagged.append({"kind": "band", "metric": metric,
                                    "step": step_idx + 1, "ratio": ratio,
                                    "width": w_max})
        if metric.endswith(".attn_scores") and len(widths) > 1:
            # least-squares exponent of init RMS vs width over all widths
            xs = [math.log(w) for w in widths]
            ys = [math.log(per_width[w][0]) for w in widths]
            xbar, ybar = sum(xs) / len(xs), sum(ys) / len(ys)
            slope = (sum((x - xbar) * (y - ybar) for x, y in zip(xs, ys))
                     / sum((x - xbar) ** 2 for x in xs))
            score_exponents[metric] = slope
            if abs(slope - SCORE_EXPONENT) > slope_tolerance:
                flagged.append({"kind": "score_scaling", "metric": metric,
                                "exponent": slope,
                                "expected": SCORE_EXPONENT,
                                "width": w_max})
    return CoordCheckReport(widths=widths, steps=steps, band=band,
                            slope_tolerance=slope_tolerance, rms=rms,
                            ratios=ratios, score_exponents=score_exponents,
                            flagged=flagged)
