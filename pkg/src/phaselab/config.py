"""Configuration types: model architecture, muP scaling constants, training phases,
and data mixtures, plus the human-readable run-config file format.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    """Decoder architecture dimensions.

    ``rotary_fraction`` is the leading fraction of each head's dimensions that
    receives rotary rotation; the remainder passes through unchanged.
    ``attention_scaling`` selects the divisor of the raw attention scores:
    "head_dim" (score = QK^T / d_head, the default), "hidden_dim"
    (QK^T / hidden_dim), or "sqrt_head_dim" (QK^T / sqrt(d_head), the
    conventional scaling, kept selectable as a negative control).
    """

    n_layers: int
    hidden_dim: int
    n_heads: int
    vocab_size: int
    seq_len: int
    rotary_fraction: float = 0.25
    use_bias_linear: bool = True
    use_bias_norm: bool = True
    ffn_hidden_dim: int | None = None
    attention_scaling: str = "head_dim"
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_dim < 1 or self.n_heads < 1:
            raise ConfigError("hidden_dim and n_heads must be positive")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if not (0.0 < self.rotary_fraction <= 1.0):
            raise ConfigError(f"rotary_fraction must be in (0, 1], got {self.rotary_fraction}")
        rot = self.rotary_fraction * self.head_dim
        if abs(rot - round(rot)) > 1e-9 or round(rot) % 2 != 0:
            raise ConfigError(
                f"rotary_fraction * head_dim = {rot} must be an even integer "
                "(rotary operates on dimension pairs)"
            )
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.attention_scaling not in ("head_dim", "hidden_dim", "sqrt_head_dim"):
            raise ConfigError(f"unknown attention_scaling {self.attention_scaling!r}")
        if self.ffn_hidden_dim is not None and self.ffn_hidden_dim < 1:
            raise ConfigError("ffn_hidden_dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def rotary_dims(self) -> int:
        """Number of rotated dimensions per head (leading slice)."""
        return int(round(self.rotary_fraction * self.head_dim))

    @property
    def ffn_dim(self) -> int:
        """SwiGLU hidden width; defaults to 8/3 of hidden_dim (floor)."""
        if self.ffn_hidden_dim is not None:
            return self.ffn_hidden_dim
        return (8 * self.hidden_dim) // 3

    @property
    def attention_inv_scale(self) -> float:
        if self.attention_scaling == "head_dim":
            return 1.0 / self.head_dim
        if self.attention_scaling == "hidden_dim":
            return 1.0 / self.hidden_dim
        return 1.0 / math.sqrt(self.head_dim)


@dataclass(frozen=True)
class MuPParams:
    """The five muP constants that determine init, multipliers, and LR scaling.

    ``width_scale`` must equal ``base_width / hidden_dim`` of the model the
    params are built for; use :meth:`for_width` to derive it.
    """

    init_std: float = 0.073
    embeddings_scale: float = 14.6
    output_alpha: float = 2.22
    base_width: int = 256
    width_scale: float = 1.0

    def __post_init__(self):
        for name in ("init_std", "embeddings_scale", "output_alpha", "width_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")

    @classmethod
    def for_width(cls, hidden_dim: int, base_width: int = 256, *,
                  init_std: float = 0.073, embeddings_scale: float = 14.6,
                  output_alpha: float = 2.22) -> "MuPParams":
        return cls(
            init_std=init_std,
            embeddings_scale=embeddings_scale,
            output_alpha=output_alpha,
            base_width=base_width,
            width_scale=base_width / hidden_dim,
        )

    def validate_width(self, hidden_dim: int) -> None:
        expected = self.base_width / hidden_dim
        if self.width_scale != expected:
            raise ConfigError(
                f"width_scale {self.width_scale} != base_width/hidden_dim = {expected}"
            )

    @property
    def hidden_init_std(self) -> float:
        """Init std for hidden and output matrices: init_std * sqrt(width_scale)."""
        return self.init_std * math.sqrt(self.width_scale)

    @property
    def logit_scale(self) -> float:
        """Multiplier applied to the output logits: output_alpha * width_scale."""
        return self.output_alpha * self.width_scale


PHASE_IDS = ("phase1", "phase2", "adaptation")


@dataclass(frozen=True)
class PhaseSpec:
    """One training phase: step budget, LR endpoints, warmup, batch geometry."""

    phase_id: str
    warmup_steps: int
    total_steps: int
    max_lr: float
    min_lr: float
    batch_size: int
    seq_len: int
    decay_shape: str = "linear"  # or "cosine"

    def __post_init__(self):
        if self.phase_id not in PHASE_IDS:
            raise ConfigError(f"phase_id must be one of {PHASE_IDS}, got {self.phase_id!r}")
        if not (0 < self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}"
            )
        if not (0 < self.min_lr <= self.max_lr):
            raise ConfigError(f"need 0 < min_lr <= max_lr, got {self.min_lr}/{self.max_lr}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be positive")
        if self.decay_shape not in ("linear", "cosine"):
            raise ConfigError(f"decay_shape must be linear or cosine, got {self.decay_shape!r}")

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len


# Domains with code-like content; FIM applies to these only.
CODE_DOMAINS = frozenset({"code", "adaptation_code"})


@dataclass(frozen=True)
class MixtureSpec:
    """Domain-weighted data mixture for one phase.

    ``fim_rate`` is the per-document probability of the fill-in-the-middle
    transform, applied to code domains only. ``sampling`` picks the draw
    unit: "bernoulli" draws each sequence's domain i.i.d. (the default);
    "quota" fixes per-batch domain counts proportional to the weights.
    """

    weights: dict[str, float] = field(default_factory=dict)
    fim_rate: float = 0.0
    fim_mode: str = "psm"  # or "spm"
    sampling: str = "bernoulli"  # or "quota"

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("mixture needs at least one domain")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("mixture weights must be >= 0")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must sum to 1 within 1e-9, got {total}")
        if not (0.0 <= self.fim_rate <= 1.0):
            raise ConfigError(f"fim_rate must be in [0, 1], got {self.fim_rate}")
        if self.fim_mode not in ("psm", "spm"):
            raise ConfigError(f"fim_mode must be psm or spm, got {self.fim_mode!r}")
        if self.sampling not in ("bernoulli", "quota"):
            raise ConfigError(f"sampling must be bernoulli or quota, got {self.sampling!r}")

    @property
    def domains(self) -> tuple[str, ...]:
        """Domains in deterministic (sorted) order; the sampling order contract."""
        return tuple(sorted(self.weights))


# ---------------------------------------------------------------------------
# Run config file: a key/value document (configparser syntax, ':' delimited).
# The muP section uses the canonical constant names; phase sections use the
# reference schedule field names ("warm-up steps", "total steps", ...).
# ---------------------------------------------------------------------------

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_mixture(s: str) -> dict[str, float]:
    weights = {}
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"mixture entries look like 'domain=weight', got {part!r}")
        name, value = part.split("=", 1)
        weights[name.strip()] = float(value)
    return weights


@dataclass
class RunConfig:
    """Everything a training run needs, parsed from one config file."""

    model: ModelConfig
    mup: MuPParams
    phases: list[PhaseSpec]
    mixtures: dict[str, MixtureSpec]
    shard_paths: dict[str, str]
    probe_paths: dict[str, str]
    run_dir: str = "runs/default"
    seed: int = 0
    dtype: str = "float32"
    checkpoint_interval: int = 0  # 0 -> max(1, total_steps // 10) per phase
    probe_batch_size: int = 8
    # optimizer hyperparameters
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-9
    weight_decay: float = 0.1
    gradient_clip_norm: float = 1.0
    # spike recovery policy
    spike_window: int = 50
    spike_mad_threshold: float = 3.0
    spike_consecutive: int = 3
    source_text: str = ""

    def phase(self, phase_id: str) -> PhaseSpec:
        for p in self.phases:
            if p.phase_id == phase_id:
                return p
        raise ConfigError(f"no phase {phase_id!r} in config")


def _fresh_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(delimiters=(":", "="), interpolation=None,
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep key case and spaces as written
    return parser


def load_run_config(path_or_text: str, *, is_text: bool = False) -> RunConfig:
    parser = _fresh_parser()
    if is_text:
        text = path_or_text
    else:
        with open(path_or_text, "r", encoding="utf-8") as fh:
            text = fh.read()
    parser.read_string(text)

    def sec(name):
        if not parser.has_section(name):
            raise ConfigError(f"missing [{name}] section")
        return parser[name]

    m = sec("model")
    model = ModelConfig(
        n_layers=int(m["n_layers"]),
        hidden_dim=int(m["hidden_dim"]),
        n_heads=int(m["n_heads"]),
        vocab_size=int(m["vocab_size"]),
        seq_len=int(m["seq_len"]),
        rotary_fraction=float(m.get("rotary_fraction", "0.25")),
        use_bias_linear=_parse_bool(m.get("use_bias_linear", "true")),
        use_bias_norm=_parse_bool(m.get("use_bias_norm", "true")),
        ffn_hidden_dim=int(m["ffn_hidden_dim"]) if "ffn_hidden_dim" in m else None,
        attention_scaling=m.get("attention_scaling", "head_dim").strip(),
    )

    mu = sec("mup")
    base_width = int(mu.get("mup_base_width", "256"))
    mup = MuPParams.for_width(
        model.hidden_dim,
        base_width=base_width,
        init_std=float(mu.get("mup_initialization_standard_deviation", "0.073")),
        embeddings_scale=float(mu.get("mup_embeddings_scale", "14.6")),
        output_alpha=float(mu.get("mup_output_alpha", "2.22")),
    )
    if "mup_width_scale" in mu:
        stated = float(mu["mup_width_scale"])
        if stated != mup.width_scale:
            raise ConfigError(
                f"mup_width_scale {stated} inconsistent with "
                f"base_width/hidden_dim = {mup.width_scale}"
            )

    opt = parser["optimizer"] if parser.has_section("optimizer") else {}
    run = parser["run"] if parser.has_section("run") else {}
    spike = parser["spike"] if parser.has_section("spike") else {}

    phases: list[PhaseSpec] = []
    mixtures: dict[str, MixtureSpec] = {}
    decay_shape = opt.get("decay_shape", "linear").strip() if opt else "linear"
    for section in parser.sections():
        if not section.startswith("phase "):
            continue
        phase_id = section.split(" ", 1)[1].strip()
        p = parser[section]
        phases.append(PhaseSpec(
            phase_id=phase_id,
            warmup_steps=int(p["warm-up steps"]),
            total_steps=int(p["total steps"]),
            max_lr=float(p["max LR"]),
            min_lr=float(p["min LR"]),
            batch_size=int(p["batch size"]),
            seq_len=int(p["sequence length"]),
            decay_shape=p.get("decay_shape", decay_shape).strip(),
        ))
        mixtures[phase_id] = MixtureSpec(
            weights=_parse_mixture(p["mixture"]),
            fim_rate=float(p.get("fim rate", "0.0")),
            fim_mode=p.get("fim mode", "psm").strip(),
            sampling=p.get("sampling", "bernoulli").strip(),
        )
    order = {pid: i for i, pid in enumerate(PHASE_IDS)}
    phases.sort(key=lambda p: order[p.phase_id])

    shard_paths = dict(parser["data"]) if parser.has_section("data") else {}
    probe_section = dict(parser["probe"]) if parser.has_section("probe") else {}
    probe_batch = int(probe_section.pop("batch size", "8"))

    return RunConfig(
        model=model,
        mup=mup,
        phases=phases,
        mixtures=mixtures,
        shard_paths=shard_paths,
        probe_paths=probe_section,
        run_dir=run.get("run_dir", "runs/default"),
        seed=int(run.get("seed", "0")),
        dtype=run.get("dtype", "float32").strip(),
        checkpoint_interval=int(run.get("checkpoint_interval", "0")),
        probe_batch_size=probe_batch,
        beta1=float(opt.get("beta1", "0.9")) if opt else 0.9,
        beta2=float(opt.get("beta2", "0.95")) if opt else 0.95,
        epsilon=float(opt.get("epsilon", "1e-9")) if opt else 1e-9,
        weight_decay=float(opt.get("weight_decay", "0.1")) if opt else 0.1,
        gradient_clip_norm=float(opt.get("gradient_clip_norm", "1.0")) if opt else 1.0,
        spike_window=int(spike.get("window", "50")) if spike else 50,
        spike_mad_threshold=float(spike.get("mad_threshold", "3.0")) if spike else 3.0,
        spike_consecutive=int(spike.get("consecutive", "3")) if spike else 3,
        source_text=text,
    )


def dump_model_section(model: ModelConfig, mup: MuPParams) -> str:
    """Render the [model] + [mup] sections with canonical field names."""
    parser = _fresh_parser()
    parser["model"] = {
        "n_layers": str(model.n_layers),
        "hidden_dim": str(model.hidden_dim),
        "n_heads": str(model.n_heads),
        "vocab_size": str(model.vocab_size),
        "seq_len": str(model.seq_len),
        "rotary_fraction": repr(model.rotary_fraction),
        "use_bias_linear": str(model.use_bias_linear).lower(),
        "use_bias_norm": str(model.use_bias_norm).lower(),
        "attention_scaling": model.attention_scaling,
    }
    parser["mup"] = {
        "mup_base_width": str(mup.base_width),
        "mup_initialization_standard_deviation": repr(mup.init_std),
        "mup_embeddings_scale": repr(mup.embeddings_scale),
        "mup_output_alpha": repr(mup.output_alpha),
        "mup_width_scale": repr(mup.width_scale),
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
