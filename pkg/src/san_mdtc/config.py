"""Training configuration and the flat ``key = value`` config-file format."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

log = logging.getLogger(__name__)

MODES = ("san", "shared_private")
ABLATIONS = ("none", "zero", "shuffle")
EM_MODES = ("paper", "moment")
VARIANTS = ("full", "no_dls", "no_rplr", "plain")


@dataclass
class TrainConfig:
    lam: float = 1e-4
    gamma: float = 0.9
    dls: bool = True
    lam_rplr: float = 1.0
    lr: float = 1e-4
    batch_size: int = 8
    dropout: float = 0.4
    shared_dim: int = 128
    specific_dim: int = 64
    hidden: tuple[int, ...] = (1000, 500)
    logvar_init: float = -4.0
    n_critic: int = 5
    init_epochs: int = 5
    main_epochs: int = 20
    em_iters: int = 20
    em_tol: float = 1e-5
    em_mode: str = "paper"
    em_min_samples: int = 10
    em_uniform_support: bool = False
    radius: float = 1.0
    vocab_size: int = 5000
    seed: int = 0
    mode: str = "san"
    msuda_target: str | None = None
    ablation: str = "none"

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lam < 0 or self.lam_rplr < 0:
            raise ConfigError("lam and lam_rplr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        for name in ("n_critic", "init_epochs", "main_epochs", "em_iters", "em_min_samples"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if min(self.shared_dim, self.specific_dim, self.vocab_size) < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer sizes must be positive")
        if self.radius <= 0:
            raise ConfigError("radius must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.em_mode not in EM_MODES:
            raise ConfigError(f"em_mode must be one of {EM_MODES}")
        return self

    @property
    def dls_gamma(self) -> float | None:
        """Smoothing level handed to the objectives; ``None`` means one-hot."""
        return self.gamma if self.dls else None

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def variant(self, name: str) -> "TrainConfig":
        """Ablation variants: drop label smoothing, drop the pseudo-label term, or both."""
        if name not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        dls = name in ("full", "no_rplr")
        rplr = self.lam_rplr if name in ("full", "no_dls") else 0.0
        return self.replace(dls=dls, lam_rplr=rplr)


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(name: str, text: str, types: dict[str, str] = FIELD_TYPES):
    """Convert the textual value of field ``name`` to its declared type."""
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = types[name]
    try:
        if t == "bool":
            return _parse_bool(text)
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
        if t.startswith("tuple"):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if t == "str | None":
            return None if text.strip().lower() in ("", "none") else text.strip()
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def read_kv_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Dashes in keys are
    read as underscores so flag spellings work too."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    for i, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{p}:{i}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def config_from_mapping(values: dict[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    changes = {}
    for k, v in values.items():
        if k not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        changes[k] = coerce(k, v) if isinstance(v, str) else v
    return dataclasses.replace(cfg, **changes).validate()


def write_kv_file(cfg: TrainConfig, path, extra: dict[str, Any] | None = None) -> None:
    lines = []
    for k, v in {**cfg.to_dict(), **(extra or {})}.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {'none' if v is None else v}")
    Path(path).write_text("\n".join(lines) + "\n")
