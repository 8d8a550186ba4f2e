"""Model configuration, presets and the key=value config-file reader."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields, replace

GENERATORS = ("linear", "transformer", "none")
ATTN_MODES = (
    "global_local_shared",
    "global_local_unshared",
    "local_only",
    "global_only",
    "baseline_cls_mean",
)
VISUAL_OUTPUTS = ("first_global", "avg_global", "avg_local", "avg_global_local")
TEXT_POSITIONS = ("pre_only", "pre_post")
DIRECTIONS = ("v_to_t", "t_to_v")

ENUMS = {
    "generator": GENERATORS,
    "attn_mode": ATTN_MODES,
    "visual_output": VISUAL_OUTPUTS,
    "text_positions": TEXT_POSITIONS,
    "projection_direction": DIRECTIONS,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture, prompt and ablation knob.

    Shapes of all backbone and prompt tensors are derived from this object
    alone. ``raw_dim`` is the length of one input patch vector and
    ``init_std`` the standard deviation of the frozen backbone's random
    weights.
    """

    d_v: int = 32
    d_t: int = 32
    d_joint: int = 32
    N: int = 2
    H_v: int = 4
    H_t: int = 4
    P: int = 4
    t: int = 4
    L: int = 8
    V: int = 64
    raw_dim: int = 16
    n_f: int = 4
    n_g: int = 4
    n_pre: int = 4
    n_post: int = 4
    generator: str = "linear"
    attn_mode: str = "global_local_shared"
    visual_output: str = "first_global"
    text_positions: str = "pre_post"
    projection_direction: str = "v_to_t"
    seed: int = 0
    train_logit_scale: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        for name, choices in ENUMS.items():
            if getattr(self, name) not in choices:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {choices}")
        for name in ("d_v", "d_t", "d_joint", "N", "H_v", "H_t", "P", "t", "L", "V", "raw_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_f", "n_g", "n_pre", "n_post"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.d_v % self.H_v:
            raise ConfigError(f"d_v={self.d_v} not divisible by H_v={self.H_v}")
        if self.d_t % self.H_t:
            raise ConfigError(f"d_t={self.d_t} not divisible by H_t={self.H_t}")
        if self.generator == "linear" and not self.n_f == self.n_pre == self.n_post:
            raise ConfigError("linear generator needs n_f == n_pre == n_post")
        if self.attn_mode != "baseline_cls_mean" and self.n_g < 1:
            raise ConfigError(f"attn_mode={self.attn_mode} needs n_g >= 1")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    # --- derived ----------------------------------------------------------

    @property
    def has_global(self) -> bool:
        """Whether global prompt tokens exist in the visual tower."""
        return self.attn_mode in ("global_local_shared", "global_local_unshared", "global_only")

    @property
    def frame_prompts_in_video(self) -> bool:
        return self.attn_mode != "global_only" and self.n_f > 0

    @property
    def use_post(self) -> bool:
        return self.text_positions == "pre_post"

    @property
    def n_post_used(self) -> int:
        return self.n_post if self.use_post else 0

    @property
    def effective_visual_output(self) -> str:
        """Global-pooled outputs fall back to ``avg_local`` when there is no G."""
        return self.visual_output if self.has_global else "avg_local"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        """SHA-256 over the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# Desk-scale smoke config (widths 32); used by unit and gradient checks.
TINY = ModelConfig()

# Learnable toy: widths 256 with a width-scaled init std so the random frozen
# backbone keeps roughly the per-layer gain of a 768-wide model.
TOY = ModelConfig(d_v=256, d_t=256, d_joint=256, init_std=0.035)

VITB32_LINEAR = ModelConfig(
    d_v=768, d_t=512, d_joint=512, N=12, H_v=12, H_t=8, P=49, t=12, L=32, V=49408,
    raw_dim=3 * 32 * 32,
)
VITB32_TRANSFORMER = replace(VITB32_LINEAR, generator="transformer")

PRESETS = {
    "tiny": TINY,
    "toy": TOY,
    "vitb32-linear": VITB32_LINEAR,
    "vitb32-transformer": VITB32_TRANSFORMER,
}


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    if kind == "float | None":
        return None if raw.strip().lower() in ("", "none") else float(raw)
    return raw.strip()


def override(obj, values: dict):
    """Return a copy of dataclass ``obj`` with string values coerced by field type."""
    types = {f.name: f.type for f in fields(obj)}
    kw = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
        kw[key] = _coerce(types[key], raw) if isinstance(raw, str) else raw
    return replace(obj, **kw)


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
