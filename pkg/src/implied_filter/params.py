"""Market, contract and model parameter containers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from ._validation import check_finite, check_nonnegative, check_positive
from .exceptions import InvalidInputError


class FellerWarning(UserWarning):
    """Heston parameters violate gamma**2 <= 2 * kappa * xbar."""


class OptionKind(str, Enum):
    CALL = "call"
    PUT = "put"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text in ("c", "call"):
            return cls.CALL
        if text in ("p", "put"):
            return cls.PUT
        raise InvalidInputError(f"unknown option kind {value!r}")


@dataclass(frozen=True)
class MarketState:
    """Spot, continuously compounded rate and the current time (years)."""

    spot: float
    rate: float = 0.0
    time_now: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "spot", check_positive(self.spot, "spot"))
        object.__setattr__(self, "rate", check_finite(self.rate, "rate"))
        object.__setattr__(self, "time_now", check_finite(self.time_now, "time_now"))

    def forward(self, maturity):
        return self.spot * math.exp(self.rate * (maturity - self.time_now))

    def discount(self, maturity):
        return math.exp(-self.rate * (maturity - self.time_now))


@dataclass(frozen=True)
class OptionSpec:
    strike: float
    maturity: float
    kind: OptionKind = OptionKind.CALL

    def __post_init__(self):
        object.__setattr__(self, "strike", check_positive(self.strike, "strike"))
        object.__setattr__(self, "maturity", check_finite(self.maturity, "maturity"))
        object.__setattr__(self, "kind", OptionKind.parse(self.kind))

    def tau(self, mkt: MarketState) -> float:
        tau = self.maturity - mkt.time_now
        if tau <= 0.0:
            raise InvalidInputError(
                f"option maturity {self.maturity} is not after time_now {mkt.time_now}"
            )
        return tau


@dataclass(frozen=True)
class HestonParams:
    """Risk-neutral CIR variance dynamics.

    ``kappa`` and ``xbar`` are the risk-neutral mean-reversion speed and level,
    i.e. the volatility-risk premium is already folded in. Parameters outside
    the Feller region are accepted with a :class:`FellerWarning`, because the
    sensitivity studies deliberately step across the boundary.
    """

    kappa: float
    xbar: float
    gamma_vol: float
    rho: float

    def __post_init__(self):
        check_positive(self.kappa, "kappa")
        check_positive(self.xbar, "xbar")
        check_nonnegative(self.gamma_vol, "gamma_vol")
        rho = check_finite(self.rho, "rho")
        if not -1.0 < rho < 1.0:
            raise InvalidInputError(f"rho must lie strictly inside (-1, 1), got {rho}")
        if not self.feller_satisfied():
            warnings.warn(
                f"Feller condition violated: gamma^2={self.gamma_vol ** 2:.6g} > "
                f"2*kappa*xbar={2 * self.kappa * self.xbar:.6g}",
                FellerWarning,
                stacklevel=3,
            )

    @property
    def feller_ratio(self) -> float:
        return self.gamma_vol**2 / (2.0 * self.kappa * self.xbar)

    def feller_satisfied(self, rtol=1e-12) -> bool:
        return self.feller_ratio <= 1.0 + rtol

    def stationary_std(self) -> float:
        return self.gamma_vol * math.sqrt(self.xbar / (2.0 * self.kappa))


@dataclass(frozen=True)
class JumpParams:
    """Log-normal jumps arriving at Poisson rate ``lambda_j``.

    ``log(1 + J)`` is normal with mean ``log(1 + mu_j) - sigma_j**2 / 2`` and
    standard deviation ``sigma_j``, so ``E[J] = mu_j``.
    """

    lambda_j: float
    mu_j: float
    sigma_j: float

    def __post_init__(self):
        check_nonnegative(self.lambda_j, "lambda_j")
        mu = check_finite(self.mu_j, "mu_j")
        if mu <= -1.0:
            raise InvalidInputError(f"mu_j must be > -1, got {mu}")
        check_nonnegative(self.sigma_j, "sigma_j")

    @property
    def compensator(self) -> float:
        return self.mu_j * self.lambda_j

    @property
    def log_jump_mean(self) -> float:
        return math.log1p(self.mu_j) - 0.5 * self.sigma_j**2


@dataclass(frozen=True)
class ModelParams:
    """Heston parameters with optional jumps and the physical drift.

    ``vol_risk_premium`` is the lambda of the affine risk-neutral drift; the
    physical dynamics used by the particle filter have speed
    ``kappa - vol_risk_premium`` and level ``kappa * xbar / (kappa - vol_risk_premium)``.
    """

    heston: HestonParams
    jumps: Optional[JumpParams] = None
    mu_phys: float = 0.05
    vol_risk_premium: float = 0.0

    def __post_init__(self):
        check_finite(self.mu_phys, "mu_phys")
        check_finite(self.vol_risk_premium, "vol_risk_premium")
        if self.heston.kappa - self.vol_risk_premium <= 0.0:
            raise InvalidInputError("physical mean-reversion speed must be positive")

    @classmethod
    def from_values(cls, kappa, xbar, gamma_vol, rho, lambda_j=None, mu_j=0.0,
                    sigma_j=0.0, **kwargs):
        jumps = None if lambda_j is None else JumpParams(lambda_j, mu_j, sigma_j)
        return cls(HestonParams(kappa, xbar, gamma_vol, rho), jumps, **kwargs)

    def physical(self) -> HestonParams:
        h = self.heston
        if not self.vol_risk_premium:
            return h
        kappa_p = h.kappa - self.vol_risk_premium
        return HestonParams(kappa_p, h.kappa * h.xbar / kappa_p, h.gamma_vol, h.rho)

    def without_jumps(self) -> "ModelParams":
        return replace(self, jumps=None)

    def as_dict(self) -> dict:
        out = {
            "kappa": self.heston.kappa,
            "xbar": self.heston.xbar,
            "gamma_vol": self.heston.gamma_vol,
            "rho": self.heston.rho,
        }
        if self.jumps is not None:
            out.update(lambda_j=self.jumps.lambda_j, mu_j=self.jumps.mu_j,
                       sigma_j=self.jumps.sigma_j)
        out["mu_phys"] = self.mu_phys
        out["vol_risk_premium"] = self.vol_risk_premium
        return out
