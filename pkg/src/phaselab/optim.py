"""AdamW with width-aware parameter groups and phase warmup/decay schedules.

Groups follow the three-way split: embeddings train at the base LR with base
weight decay, normalization tensors at the base LR with zero decay, and
everything else at ``base_lr * width_scale`` with base decay. Gradients are
clipped by global L2 norm before the moment updates; weight decay is
decoupled and scaled by the group's effective LR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import ConfigError, MuPParams, PhaseSpec
from .model import (
    ParamSet,
    ROLE_EMBEDDING,
    ROLE_LINEAR_BIAS,
    ROLE_LINEAR_WEIGHT,
    ROLE_NORM_BIAS,
    ROLE_NORM_GAIN,
    ROLE_OUTPUT_BIAS,
    ROLE_OUTPUT_WEIGHT,
    role_of,
)


class ClassificationError(KeyError):
    """Unknown parameter role; classification never silently defaults."""


class ScheduleRangeError(ValueError):
    """Step queried outside [0, total_steps]."""


GROUP_EMBEDDING = "embedding"
GROUP_NORMALIZATION = "normalization"
GROUP_OTHER = "other"


@dataclass(frozen=True)
class ParamGroupRule:
    group: str
    lr_multiplier: float
    weight_decay: float


_ROLE_TO_GROUP = {
    ROLE_EMBEDDING: GROUP_EMBEDDING,
    ROLE_NORM_GAIN: GROUP_NORMALIZATION,
    ROLE_NORM_BIAS: GROUP_NORMALIZATION,
    ROLE_LINEAR_WEIGHT: GROUP_OTHER,
    ROLE_LINEAR_BIAS: GROUP_OTHER,
    ROLE_OUTPUT_WEIGHT: GROUP_OTHER,
    ROLE_OUTPUT_BIAS: GROUP_OTHER,
}


def classify_param(role: str, mup: MuPParams, base_weight_decay: float = 0.1) -> ParamGroupRule:
    """Map a tensor role to its (group, lr multiplier, weight decay) rule."""
    group = _ROLE_TO_GROUP.get(role)
    if group is None:
        raise ClassificationError(f"unknown parameter role {role!r}")
    if group == GROUP_EMBEDDING:
        return ParamGroupRule(group, 1.0, base_weight_decay)
    if group == GROUP_NORMALIZATION:
        return ParamGroupRule(group, 1.0, 0.0)
    return ParamGroupRule(group, mup.width_scale, base_weight_decay)


def build_group_rules(params: ParamSet, mup: MuPParams,
                      base_weight_decay: float = 0.1) -> dict[str, ParamGroupRule]:
    """Classify every tensor of a model; raises on any unknown name."""
    return {
        name: classify_param(role_of(name), mup, base_weight_decay)
        for name in params.names()
    }


def lr_at(phase: PhaseSpec, step: int) -> float:
    """Learning rate at an integer step of the phase schedule.

    Linear ramp 0 -> max_lr over [0, warmup_steps], then decay from max_lr to
    min_lr at total_steps (linear by default, cosine selectable). Exact at
    the endpoints.
    """
    if not (0 <= step <= phase.total_steps):
        raise ScheduleRangeError(
            f"step {step} outside [0, {phase.total_steps}] for {phase.phase_id}"
        )
    if step <= phase.warmup_steps:
        return phase.max_lr * (step / phase.warmup_steps)
    if step == phase.total_steps:
        return phase.min_lr
    progress = (step - phase.warmup_steps) / (phase.total_steps - phase.warmup_steps)
    if phase.decay_shape == "cosine":
        return phase.min_lr + 0.5 * (phase.max_lr - phase.min_lr) * (
            1.0 + np.cos(np.pi * progress))
    return phase.max_lr + (phase.min_lr - phase.max_lr) * progress


@dataclass
class OptimState:
    """AdamW moments plus the fixed hyperparameters."""

    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-9
    weight_decay: float = 0.1
    gradient_clip_norm: float = 1.0

    @classmethod
    def init(cls, params: ParamSet, **hyper) -> "OptimState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), **hyper)


def global_grad_norm(grads: ParamSet) -> float:
    total = 0.0
    for g in grads.tensors.values():
        total += float(np.square(g, dtype=np.float64).sum())
    return float(np.sqrt(total))


def clip_gradients(grads: ParamSet, max_norm: float) -> tuple[ParamSet, float]:
    """Global L2 clipping. Returns (clipped grads, pre-clip norm); gradients
    are returned unchanged when already within the bound."""
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm before clipping")
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return ParamSet({k: g * grads[k].dtype.type(scale) for k, g in grads.items()}), norm


def adamw_step(state: OptimState, params: ParamSet, grads: ParamSet, lr: float,
               rules: dict[str, ParamGroupRule],
               in_place: bool = False) -> tuple[ParamSet, OptimState]:
    """One clipped, bias-corrected AdamW update.

    ``state`` moments always update in place and the step counter advances by
    one. By default the input tensors are left untouched and fresh parameters
    are returned; ``in_place=True`` applies the update directly (the training
    loop owns its parameters exclusively during the apply step).
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if set(params.names()) != set(grads.names()):
        raise ConfigError("params and grads must hold the same tensors")
    grads, _ = clip_gradients(grads, state.gradient_clip_norm)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new_tensors = {}
    for name, p in params.items():
        rule = rules[name]
        if not in_place:
            p = p.copy()
        kernels.adamw_update(
            p.reshape(-1), np.ascontiguousarray(grads[name].reshape(-1)),
            state.m[name].reshape(-1), state.v[name].reshape(-1),
            lr * rule.lr_multiplier, state.beta1, state.beta2, state.epsilon,
            rule.weight_decay, bc1, bc2,
        )
        new_tensors[name] = p
    return (params if in_place else ParamSet(new_tensors)), state


@dataclass
class GroupSummary:
    group: str
    tensor_count: int = 0
    param_count: int = 0
    lr_multiplier: float = 0.0
    weight_decay: float = 0.0
    names: list[str] = field(default_factory=list)


def summarize_groups(params: ParamSet, rules: dict[str, ParamGroupRule]) -> dict[str, GroupSummary]:
    out: dict[str, GroupSummary] = {}
    for name, p in params.items():
        rule = rules[name]
        s = out.setdefault(rule.group, GroupSummary(rule.group))
        s.tensor_count += 1
        s.param_count += p.size
        s.lr_multiplier = rule.lr_multiplier
        s.weight_decay = rule.weight_decay
        s.names.append(name)
    return out
