"""Plain-text ``key=value`` experiment configuration.

Lines starting with ``#`` and blank lines are ignored. Values are coerced to
the type of the matching :class:`ExperimentConfig` field; ``none`` or an empty
value clears an optional field and tuples are comma separated.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from typing import Optional

from .exceptions import InvalidInputError

__all__ = ["ExperimentConfig", "load_config", "parse_overrides"]

PRESET_NAMES = {"d0": 0, "d1": 1, "d2": 2}


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by the experiments and the daily pipeline.

    Fields left as ``None`` take the experiment's own default; the per-field
    comments give those defaults.
    """

    experiment: str = "heston"  # bs | heston | precision | perturb | conditioning | pipeline
    model: str = "heston"  # heston | heston_jumps (pipeline)
    grid_size: Optional[int] = None  # bs 61, heston 41, pipeline 60
    grid_dx: Optional[float] = None  # bs .0082, heston .0026, pipeline .0025
    preset: Optional[str] = None  # d0 | d1 | d2
    alpha0: Optional[float] = None  # bs/heston 1e-4, perturb 1e-6
    alpha1: Optional[float] = None  # 0
    alpha2: Optional[float] = None  # 0
    decimals: Optional[int] = None  # None means exact prices
    solver: str = "active_set"
    prior: str = "gamma"  # gamma | point
    rho: Optional[float] = None  # heston -0.6, perturb -0.45
    perturb_param: str = "rho"  # rho | gamma_vol | kappa | xbar
    perturb_deltas: tuple = (0.02, -0.02)
    smoothing_alpha1: float = 1e-8
    rounded_alpha0: float = 1e-3
    include_rounded: bool = True
    alpha_grid: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    seed: int = 0
    # pipeline
    n_restarts: int = 8
    warm_restarts: int = 2
    min_business_days: int = 7
    moneyness_scale: float = 10.0
    tau_star_days: float = 30.0
    fallback_rate: float = 0.0
    mu_phys: float = 0.05
    calib_max_iter: int = 1500
    calib_xatol: float = 1e-7
    calib_fatol: float = 1e-12

    def __post_init__(self):
        if self.preset is not None and self.preset not in PRESET_NAMES:
            raise InvalidInputError(f"unknown preset {self.preset!r}; expected d0, d1 or d2")
        if self.decimals is not None and self.decimals < 0:
            raise InvalidInputError("decimals must be nonnegative")
        for name in ("perturb_deltas", "alpha_grid"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, mapping):
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise InvalidInputError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, hints[key], key)
        return cls(**kwargs)

    def as_dict(self):
        return dataclasses.asdict(self)


def _coerce(raw, hint, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    optional = origin is typing.Union and type(None) in args
    if optional:
        if text.lower() in ("", "none", "exact"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InvalidInputError(f"bad value {raw!r} for {key}") from None
    return text


def _parse_lines(lines, source):
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInputError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items):
    """``["key=value", ...]`` to a dict."""
    return _parse_lines(items or (), "override")


def load_config(path=None, overrides=None) -> ExperimentConfig:
    mapping = {}
    if path is not None:
        with open(path) as fh:
            mapping.update(_parse_lines(fh, str(path)))
    mapping.update(parse_overrides(overrides))
    return ExperimentConfig.from_mapping(mapping)
