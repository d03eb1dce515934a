"""Multi-phase training orchestration.

Runs phases in order with per-phase LR schedules (weights and optimizer
moments carry over; the schedule and warmup restart each phase), emits
hash-verified checkpoints on a configurable cadence, resumes bit-exactly
from a checkpoint, and recovers from loss spikes by consuming batches
without applying their gradients.
"""

from __future__ import annotations

import dataclasses
import json
import os
import statistics
from dataclasses import dataclass, field

import numpy as np

from .config import (
    ConfigError,
    MixtureSpec,
    ModelConfig,
    MuPParams,
    PhaseSpec,
    RunConfig,
    PHASE_IDS,
)
from .data import BatchSampler, DataCursor, FimSentinels, TokenLedger, TokenShard
from .model import NumericError, ParamSet, grad, init_params
from .optim import OptimState, adamw_step, build_group_rules, lr_at

RUN_DIR_ENV = "PHASELAB_RUN_DIR"


class CheckpointError(RuntimeError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when losses stay non-finite beyond the spike policy's budget.

    The message carries a recovery hint (resume + skip-batches)."""


@dataclass
class SpikePolicy:
    """Rolling-median loss spike detector.

    A step counts as an exceedance when its loss is non-finite or lies above
    median + mad_threshold * MAD of the rolling window. ``consecutive``
    exceedances arm a skip of the next batch.
    """

    window: int = 50
    mad_threshold: float = 3.0
    consecutive: int = 3
    min_history: int = 10
    max_nonfinite: int = 5
    history: list = field(default_factory=list)
    exceed_run: int = 0
    nonfinite_run: int = 0

    def threshold(self) -> float | None:
        if len(self.history) < self.min_history:
            return None
        med = statistics.median(self.history)
        mad = statistics.median([abs(x - med) for x in self.history])
        return med + self.mad_threshold * max(mad, 1e-12)

    def observe(self, loss: float) -> bool:
        """Record a trained step's loss; True means skip the next batch."""
        finite = np.isfinite(loss)
        limit = self.threshold()
        exceeded = (not finite) or (limit is not None and loss > limit)
        if not finite:
            self.nonfinite_run += 1
            if self.nonfinite_run > self.max_nonfinite:
                raise TrainingDivergedError(
                    f"loss non-finite for {self.nonfinite_run} consecutive steps; "
                    "resume from the last checkpoint with --skip-batches to jump "
                    "past the offending data")
        else:
            self.nonfinite_run = 0
            self.history.append(float(loss))
            if len(self.history) > self.window:
                del self.history[: len(self.history) - self.window]
        if exceeded:
            self.exceed_run += 1
        else:
            self.exceed_run = 0
        if self.exceed_run >= self.consecutive:
            self.exceed_run = 0
            return True
        return False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SpikePolicy":
        return cls(**doc)


@dataclass
class TrainState:
    params: ParamSet
    optim: OptimState
    phase_id: str
    step_in_phase: int
    global_step: int
    accumulated_tokens: int
    cursor: DataCursor
    ledger: TokenLedger
    spike: SpikePolicy
    pending_skip: bool = False
    skip_events: list = field(default_factory=list)
    last_checkpoint_id: str | None = None


@dataclass
class CheckpointManifest:
    run_id: str
    checkpoint_id: str
    phase_id: str
    step: int
    accumulated_tokens: int
    files: dict[str, str]  # file name -> sha256
    config_snapshot: dict
    parent: str | None
    skip_events: list

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CheckpointManifest":
        return cls(**json.loads(text))


def _sha256_file(path) -> str:
    import hashlib
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_snapshot(model: ModelConfig, mup: MuPParams) -> dict:
    return {"model": dataclasses.asdict(model), "mup": dataclasses.asdict(mup)}


class MetricsLog:
    """Append-only JSONL, one record per optimizer step, ordered by step."""

    def __init__(self, path):
        self.path = path

    def append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def read(self) -> list[dict]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, "r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class Trainer:
    """Owns one training run: config, shards, run directory, checkpoints."""

    def __init__(self, run_config: RunConfig, shards: dict[str, TokenShard],
                 sentinels: FimSentinels | None = None,
                 run_dir: str | None = None):
        self.cfg = run_config
        self.model_config = run_config.model
        self.mup = run_config.mup
        self.shards = shards
        self.sampler = BatchSampler(shards, sentinels)
        self.run_dir = (run_dir or os.environ.get(RUN_DIR_ENV)
                        or run_config.run_dir)
        os.makedirs(os.path.join(self.run_dir, "checkpoints"), exist_ok=True)
        self.metrics = MetricsLog(os.path.join(self.run_dir, "metrics.jsonl"))
        self.run_id = run_config.source_text and _stable_run_id(run_config) or "run"
        self._dtype = np.float64 if run_config.dtype == "float64" else np.float32

    # -- state construction ------------------------------------------------

    def fresh_state(self) -> TrainState:
        params = init_params(self.model_config, self.mup, seed=self.cfg.seed,
                             dtype=self._dtype)
        optim = OptimState.init(
            params, beta1=self.cfg.beta1, beta2=self.cfg.beta2,
            epsilon=self.cfg.epsilon, weight_decay=self.cfg.weight_decay,
            gradient_clip_norm=self.cfg.gradient_clip_norm)
        domains = sorted(set().union(*[m.domains for m in self.cfg.mixtures.values()])
                         if self.cfg.mixtures else set(self.shards))
        cursor = DataCursor.fresh(self.cfg.seed + 1, domains or sorted(self.shards))
        spike = SpikePolicy(window=self.cfg.spike_window,
                            mad_threshold=self.cfg.spike_mad_threshold,
                            consecutive=self.cfg.spike_consecutive)
        first_phase = self.cfg.phases[0].phase_id if self.cfg.phases else "phase1"
        return TrainState(params=params, optim=optim, phase_id=first_phase,
                          step_in_phase=0, global_step=0, accumulated_tokens=0,
                          cursor=cursor, ledger=TokenLedger(), spike=spike)

    # -- phase execution ----------------------------------------------------

    def _consume_batch(self, state: TrainState, phase: PhaseSpec, mix: MixtureSpec):
        batch, cursor = self.sampler.sample(mix, phase, state.cursor)
        state.cursor = cursor
        state.ledger.record(phase.phase_id, batch.domain_counts, phase.seq_len)
        state.accumulated_tokens += phase.tokens_per_step
        return batch

    def _log(self, state: TrainState, phase: PhaseSpec, step: int, lr: float,
             loss, batch, skipped: bool, manual: bool) -> None:
        self.metrics.append({
            "run": self.run_id,
            "global_step": state.global_step,
            "phase": phase.phase_id,
            "step": step,
            "lr": lr,
            "loss": loss,
            "skipped": skipped,
            "manual_skip": manual,
            "tokens": state.accumulated_tokens,
            "mix": batch.domain_counts,
        })

    def run_phase(self, state: TrainState, phase: PhaseSpec, mix: MixtureSpec,
                  checkpoint_interval: int | None = None) -> TrainState:
        """Execute the remainder of ``phase``; checkpoints on the configured
        cadence and at phase end. Weights and moments carry over; the LR
        schedule restarts per phase."""
        order = {pid: i for i, pid in enumerate(PHASE_IDS)}
        if order[state.phase_id] > order[phase.phase_id]:
            raise ConfigError(
                f"state is at {state.phase_id}; cannot run earlier phase {phase.phase_id}")
        missing = [d for d in mix.domains if d not in self.shards]
        if missing:
            raise ConfigError(f"mixture domains without shards: {missing}")
        if state.phase_id != phase.phase_id:
            state.phase_id = phase.phase_id
            state.step_in_phase = 0
        interval = checkpoint_interval
        if interval is None:
            interval = self.cfg.checkpoint_interval
        if interval <= 0:
            interval = max(1, phase.total_steps // 10)

        rules = build_group_rules(state.params, self.mup,
                                  base_weight_decay=self.cfg.weight_decay)
        while state.step_in_phase < phase.total_steps:
            step = state.step_in_phase + 1
            lr = lr_at(phase, step)
            batch = self._consume_batch(state, phase, mix)
            state.global_step += 1
            if state.pending_skip:
                state.pending_skip = False
                state.skip_events.append({"phase": phase.phase_id, "step": step,
                                          "reason": "spike_policy"})
                state.step_in_phase = step
                self._log(state, phase, step, lr, None, batch,
                          skipped=True, manual=False)
            else:
                try:
                    loss_value, grads = grad(self.model_config, self.mup,
                                             state.params, batch.tokens,
                                             batch.targets)
                except NumericError:
                    loss_value, grads = float("nan"), None
                if grads is not None:
                    state.params, state.optim = adamw_step(
                        state.optim, state.params, grads, lr, rules,
                        in_place=True)
                state.pending_skip = state.spike.observe(loss_value)
                state.step_in_phase = step
                self._log(state, phase, step, lr,
                          None if not np.isfinite(loss_value) else loss_value,
                          batch, skipped=False, manual=False)
            if step % interval == 0 or step == phase.total_steps:
                self.save_checkpoint(state)
        return state

    def run_all(self, state: TrainState | None = None) -> TrainState:
        """Run every configured phase in order."""
        if state is None:
            state = self.fresh_state()
        order = {pid: i for i, pid in enumerate(PHASE_IDS)}
        for phase in self.cfg.phases:
            if order[phase.phase_id] < order[state.phase_id]:
                continue  # already completed before resume
            if (phase.phase_id == state.phase_id
                    and state.step_in_phase >= phase.total_steps):
                continue
            state = self.run_phase(state, phase, self.cfg.mixtures[phase.phase_id])
        return state

    def skip_batches(self, state: TrainState, count: int, phase: PhaseSpec,
                     mix: MixtureSpec) -> TrainState:
        """Consume ``count`` batches without gradient updates. The step
        counter and LR schedule advance; skips are logged and recorded in the
        next checkpoint manifest."""
        if count < 1:
            raise ConfigError(f"skip count must be >= 1, got {count}")
        if state.phase_id != phase.phase_id:
            state.phase_id = phase.phase_id
            state.step_in_phase = 0
        if state.step_in_phase + count > phase.total_steps:
            raise ConfigError("cannot skip past the end of the phase")
        for _ in range(count):
            step = state.step_in_phase + 1
            lr = lr_at(phase, step)
            batch = self._consume_batch(state, phase, mix)
            state.global_step += 1
            state.step_in_phase = step
            state.skip_events.append({"phase": phase.phase_id, "step": step,
                                      "reason": "manual"})
            self._log(state, phase, step, lr, None, batch,
                      skipped=True, manual=True)
        return state

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, state: TrainState) -> CheckpointManifest:
        ckpt_id = f"{state.phase_id}-{state.step_in_phase:06d}"
        ckpt_dir = os.path.join(self.run_dir, "checkpoints", ckpt_id)
        os.makedirs(ckpt_dir, exist_ok=True)
        params_path = os.path.join(ckpt_dir, "params.npz")
        state.params.save_npz(params_path)
        optim_path = os.path.join(ckpt_dir, "optim.npz")
        np.savez(optim_path,
                 **{f"m/{k}": v for k, v in state.optim.m.items()},
                 **{f"v/{k}": v for k, v in state.optim.v.items()})
        trainer_state = {
            "phase_id": state.phase_id,
            "step_in_phase": state.step_in_phase,
            "global_step": state.global_step,
            "accumulated_tokens": state.accumulated_tokens,
            "cursor": json.loads(state.cursor.to_json()),
            "ledger": state.ledger.counts,
            "spike": state.spike.to_dict(),
            "pending_skip": state.pending_skip,
            "optim": {
                "step": state.optim.step,
                "beta1": state.optim.beta1,
                "beta2": state.optim.beta2,
                "epsilon": state.optim.epsilon,
                "weight_decay": state.optim.weight_decay,
                "gradient_clip_norm": state.optim.gradient_clip_norm,
            },
            "dtype": str(state.params.dtype),
        }
        state_path = os.path.join(ckpt_dir, "trainer_state.json")
        with open(state_path, "w", encoding="utf-8") as fh:
            json.dump(trainer_state, fh, indent=2, sort_keys=True)
        files = {name: _sha256_file(os.path.join(ckpt_dir, name))
                 for name in ("params.npz", "optim.npz", "trainer_state.json")}
        manifest = CheckpointManifest(
            run_id=self.run_id,
            checkpoint_id=ckpt_id,
            phase_id=state.phase_id,
            step=state.step_in_phase,
            accumulated_tokens=state.accumulated_tokens,
            files=files,
            config_snapshot=_config_snapshot(self.model_config, self.mup),
            parent=state.last_checkpoint_id,
            skip_events=list(state.skip_events),
        )
        with open(os.path.join(ckpt_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(manifest.to_json())
        state.last_checkpoint_id = ckpt_id
        return manifest

    def load_checkpoint(self, manifest_path) -> TrainState:
        """Restore a TrainState whose continued training is step-for-step
        identical to the uninterrupted run."""
        if os.path.isdir(manifest_path):
            manifest_path = os.path.join(manifest_path, "manifest.json")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = CheckpointManifest.from_json(fh.read())
        ckpt_dir = os.path.dirname(os.path.abspath(manifest_path))
        for name, digest in manifest.files.items():
            actual = _sha256_file(os.path.join(ckpt_dir, name))
            if actual != digest:
                raise CheckpointError(
                    f"checkpoint file {name} hash mismatch: corrupt checkpoint")
        snapshot = _config_snapshot(self.model_config, self.mup)
        if manifest.config_snapshot != snapshot:
            raise IncompatibleCheckpointError(
                "checkpoint was produced under a different model/mup config")
        if manifest.phase_id not in {p.phase_id for p in self.cfg.phases}:
            raise IncompatibleCheckpointError(
                f"checkpoint phase {manifest.phase_id!r} is not part of this run's phases")

        params = ParamSet.load_npz(os.path.join(ckpt_dir, "params.npz"))
        with np.load(os.path.join(ckpt_dir, "optim.npz")) as data:
            m = ParamSet({k[2:]: data[k] for k in data.files if k.startswith("m/")})
            v = ParamSet({k[2:]: data[k] for k in data.files if k.startswith("v/")})
        with open(os.path.join(ckpt_dir, "trainer_state.json"), encoding="utf-8") as fh:
            doc = json.load(fh)
        optim = OptimState(m=m, v=v, step=doc["optim"]["step"],
                           beta1=doc["optim"]["beta1"], beta2=doc["optim"]["beta2"],
                           epsilon=doc["optim"]["epsilon"],
                           weight_decay=doc["optim"]["weight_decay"],
                           gradient_clip_norm=doc["optim"]["gradient_clip_norm"])
        ledger = TokenLedger()
        ledger.counts = doc["ledger"]
        return TrainState(
            params=params, optim=optim, phase_id=doc["phase_id"],
            step_in_phase=doc["step_in_phase"], global_step=doc["global_step"],
            accumulated_tokens=doc["accumulated_tokens"],
            cursor=DataCursor.from_json(json.dumps(doc["cursor"])),
            ledger=ledger, spike=SpikePolicy.from_dict(doc["spike"]),
            pending_skip=doc["pending_skip"],
            skip_events=list(manifest.skip_events),
            last_checkpoint_id=manifest.checkpoint_id,
        )

    def checkpoint_manifests(self) -> list[CheckpointManifest]:
        root = os.path.join(self.run_dir, "checkpoints")
        manifests = []
        for entry in sorted(os.listdir(root)):
            path = os.path.join(root, entry, "manifest.json")
            if os.path.exists(path):
                with open(path, encoding="utf-8") as fh:
                    manifests.append(CheckpointManifest.from_json(fh.read()))
        return manifests


def _stable_run_id(run_config: RunConfig) -> str:
    import hashlib
    digest = hashlib.sha256(
        (run_config.source_text + str(run_config.seed)).encode()).hexdigest()
    return f"run-{digest[:12]}"
