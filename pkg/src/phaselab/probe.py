"""Per-checkpoint evaluation probes: held-out perplexity per domain.

Perplexity is exp of the mean next-token NLL over non-overlapping windows of
a held-out shard (no FIM; probes measure plain LM ability). ``track`` probes
a list of checkpoints and emits curve records ordered by accumulated tokens,
with phase transitions marked in-band.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import ModelConfig, MuPParams
from .data import TokenShard
from .model import ParamSet, forward


class ProbeError(ValueError):
    pass


class DisjointnessError(ValueError):
    """A held-out window occurs verbatim in a training shard."""


@dataclass
class ProbeSuite:
    """Held-out shards per domain plus probe geometry."""

    shards: dict[str, TokenShard]
    seq_len: int
    batch_size: int = 8

    def __post_init__(self):
        if not self.shards:
            raise ProbeError("probe suite needs at least one held-out shard")
        if self.seq_len < 2:
            raise ProbeError("probe seq_len must be >= 2")

    def validate_disjoint(self, train_shards: dict[str, TokenShard]) -> None:
        """Fail if any held-out probe window appears (id-aligned) inside any
        training shard's token stream."""
        train_blobs = {d: s.token_ids.astype("<u4").tobytes()
                       for d, s in train_shards.items()}
        for domain, shard in self.shards.items():
            n_windows = shard.token_count // self.seq_len
            ids = shard.token_ids.astype("<u4")
            for w in range(n_windows):
                window = ids[w * self.seq_len:(w + 1) * self.seq_len].tobytes()
                for train_domain, blob in train_blobs.items():
                    at = blob.find(window)
                    while at != -1:
                        if at % 4 == 0:
                            raise DisjointnessError(
                                f"held-out window {w} of {domain!r} occurs in "
                                f"training shard {train_domain!r}")
                        at = blob.find(window, at + 1)


@dataclass
class CurveRecord:
    checkpoint_id: str
    phase: str
    step: int
    accumulated_tokens: int
    metrics: dict[str, float]
    flops_estimate: float = 0.0
    phase_transition: bool = False

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def perplexity(config: ModelConfig, mup: MuPParams, params: ParamSet,
               shard: TokenShard, seq_len: int, batch_size: int = 8) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of the shard."""
    n_windows = shard.token_count // seq_len
    if n_windows == 0:
        raise ProbeError(
            f"shard {shard.domain!r} has {shard.token_count} tokens, fewer than "
            f"one probe window of {seq_len}")
    windows = shard.token_ids[:n_windows * seq_len].astype(np.int64)
    windows = windows.reshape(n_windows, seq_len)
    loss_sum = 0.0
    n_valid = 0
    for start in range(0, n_windows, batch_size):
        tokens = windows[start:start + batch_size]
        targets = np.empty_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        targets[:, -1] = -1
        logits = forward(config, mup, params, tokens)
        s, n, _ = kernels.softmax_xent(
            np.ascontiguousarray(logits.reshape(-1, config.vocab_size)),
            targets.reshape(-1), -1)
        loss_sum += s
        n_valid += n
    return float(np.exp(loss_sum / n_valid))


def track(manifests, suite: ProbeSuite, config: ModelConfig, mup: MuPParams,
          checkpoints_root: str) -> list[CurveRecord]:
    """Probe every loadable checkpoint; records come back ordered by
    accumulated tokens with phase transitions flagged. Unloadable
    checkpoints are skipped with a warning."""
    records: list[CurveRecord] = []
    for manifest in manifests:
        ckpt_dir = os.path.join(checkpoints_root, manifest.checkpoint_id)
        try:
            params = ParamSet.load_npz(os.path.join(ckpt_dir, "params.npz"))
            metrics = {
                f"{domain}_ppl": perplexity(config, mup, params, shard,
                                            suite.seq_len, suite.batch_size)
                for domain, shard in sorted(suite.shards.items())
            }
        except (OSError, KeyError, ValueError) as err:
            warnings.warn(f"skipping checkpoint {manifest.checkpoint_id}: {err}")
            continue
        records.append(CurveRecord(
            checkpoint_id=manifest.checkpoint_id,
            phase=manifest.phase_id,
            step=manifest.step,
            accumulated_tokens=manifest.accumulated_tokens,
            metrics=metrics,
            flops_estimate=6.0 * params.total_params() * manifest.accumulated_tokens,
        ))
    records.sort(key=lambda r: r.accumulated_tokens)
    for i in range(1, len(records)):
        if records[i].phase != records[i - 1].phase:
            records[i].phase_transition = True
    return records


def write_curves(records, path) -> None:
    """One record per line, stable field order; any plotting tool can consume."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")


def balance_report(records, language_domain: str = "language",
                   code_domain: str = "code") -> list[dict]:
    """Two-axis (language metric, code metric) pairs per checkpoint."""
    lang_key = f"{language_domain}_ppl"
    code_key = f"{code_domain}_ppl"
    out = []
    for record in records:
        if lang_key not in record.metrics or code_key not in record.metrics:
            raise ProbeError(
                f"record {record.checkpoint_id} lacks {lang_key} or {code_key}")
        out.append({
            "checkpoint_id": record.checkpoint_id,
            "phase": record.phase,
            "accumulated_tokens": record.accumulated_tokens,
            lang_key: record.metrics[lang_key],
            code_key: record.metrics[code_key],
        })
    return out
