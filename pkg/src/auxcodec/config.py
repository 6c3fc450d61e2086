"""Architecture hyperparameters and their flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

LAMBDA_GRID = (0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16)


class ConfigError(ValueError):
    """Malformed config text or inconsistent hyperparameters."""


@dataclass(frozen=True)
class CodecConfig:
    # auxiliary coarse network: encoder widths at 1/2, 1/4, 1/8; latent at 1/16
    aux_channels: tuple = (32, 48, 48)
    m_aux: int = 32
    aux_hyper: int = 32
    # predicted feature widths at 1/1, 1/2, 1/4, 1/16
    feat_channels: tuple = (16, 32, 48, 32)
    # main network: stem at 1/1, encoder widths at 1/2, 1/4, 1/8; latent at 1/16
    main_stem: int = 16
    main_channels: tuple = (48, 64, 64)
    m_main: int = 48
    main_hyper: int = 32
    n_p: int = 4
    main_segments: int = 0  # 0 -> n_p
    pe_hidden: int = 32
    ape_hidden: int = 48
    attn_pool: int = 2
    sigma_min: float = 0.04
    pad_multiple: int = 64
    lam: float = 0.01
    cdf_precision: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("aux_channels", "feat_channels", "main_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.aux_channels) != 3 or len(self.main_channels) != 3:
            raise ConfigError("aux_channels and main_channels need three widths")
        if len(self.feat_channels) != 4:
            raise ConfigError("feat_channels needs four widths (1/1, 1/2, 1/4, 1/16)")
        if self.pad_multiple % 64:
            raise ConfigError("pad_multiple must be a multiple of 64")
        if self.n_p < 1 or 2 * self.n_p > self.m_aux:
            raise ConfigError(f"n_p={self.n_p} incompatible with m_aux={self.m_aux}")
        if self.n_main_segments > self.m_main:
            raise ConfigError("more main segments than latent channels")
        if self.sigma_min <= 0:
            raise ConfigError("sigma_min must be positive")
        if self.cdf_precision != 16:
            raise ConfigError("only 16-bit CDF precision is supported")

    @property
    def n_aux_segments(self) -> int:
        return 2 * self.n_p

    @property
    def n_main_segments(self) -> int:
        return self.main_segments or self.n_p

    @property
    def lambda_index(self) -> int:
        for i, lam in enumerate(LAMBDA_GRID):
            if abs(lam - self.lam) < 1e-12:
                return i
        return 255

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).digest()

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.strip("()[]").split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_config(text: str) -> CodecConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys fail."""
    defaults = CodecConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key) or key.startswith("_"):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, getattr(defaults, key))
    return CodecConfig(**values)


def format_config(cfg: CodecConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path]) -> CodecConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: CodecConfig, path: Union[str, Path]):
    Path(path).write_text(format_config(cfg))
