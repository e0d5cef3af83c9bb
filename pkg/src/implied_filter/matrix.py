"""Model-price matrices over a hidden-state grid and their conditioning."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from ._validation import as_1d, check_positive
from .exceptions import InvalidInputError, NumericFailureError
from .params import MarketState, ModelParams, OptionKind, OptionSpec
from .pricing import bs_call_prices, heston_call_prices

__all__ = [
    "ConditionReport",
    "ModelKind",
    "ModelMatrix",
    "Quote",
    "QuoteSet",
    "StateGrid",
    "build_matrix",
    "condition_diagnostics",
    "read_matrix_csv",
    "write_matrix_csv",
]


class ModelKind(str, Enum):
    BLACK_SCHOLES = "black_scholes"
    HESTON = "heston"
    HESTON_JUMPS = "heston_jumps"

    @property
    def state_meaning(self):
        return "volatility" if self is ModelKind.BLACK_SCHOLES else "variance"


@dataclass(frozen=True)
class StateGrid:
    """Strictly increasing sample points of the hidden state."""

    points: np.ndarray
    state_meaning: str = "variance"

    def __post_init__(self):
        pts = as_1d(self.points, "points")
        if pts.size == 0:
            raise InvalidInputError("grid must be nonempty")
        if np.any(pts < 0):
            raise InvalidInputError("grid points must be nonnegative")
        if np.any(np.diff(pts) <= 0):
            raise InvalidInputError("grid points must be strictly increasing")
        if self.state_meaning not in ("variance", "volatility"):
            raise InvalidInputError(f"unknown state meaning {self.state_meaning!r}")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, size, dx, state_meaning="variance"):
        """Grid ``x_j = j * dx`` for ``j = 1..size``."""
        check_positive(dx, "dx")
        if size < 1:
            raise InvalidInputError("grid size must be >= 1")
        return cls(dx * np.arange(1, size + 1), state_meaning)

    @property
    def size(self):
        return self.points.size

    def __len__(self):
        return self.points.size

    @property
    def dx(self):
        if self.points.size == 1:
            return float(self.points[0]) if self.points[0] > 0 else 1.0
        return float(np.mean(np.diff(self.points)))

    def __eq__(self, other):
        return (
            isinstance(other, StateGrid)
            and self.state_meaning == other.state_meaning
            and np.array_equal(self.points, other.points)
        )

    def __hash__(self):
        return hash((self.state_meaning, self.points.tobytes()))


@dataclass(frozen=True)
class Quote:
    opt: OptionSpec
    bid: float = math.nan
    ask: float = math.nan
    mid: Optional[float] = None

    def __post_init__(self):
        mid = self.mid
        if mid is None:
            if math.isnan(self.bid) or math.isnan(self.ask):
                raise InvalidInputError("quote needs a mid or both bid and ask")
            mid = 0.5 * (self.ask + self.bid)
        mid = float(mid)
        if not math.isnan(self.bid) and not math.isnan(self.ask):
            if not (self.bid <= mid <= self.ask):
                raise InvalidInputError(
                    f"quote violates bid <= mid <= ask ({self.bid}, {mid}, {self.ask})"
                )
        object.__setattr__(self, "mid", mid)

    @property
    def label(self):
        return f"{self.opt.kind.value[0].upper()}{self.opt.strike:g}@{self.opt.maturity:g}"


@dataclass(frozen=True)
class QuoteSet:
    """An option chain observed at one time.

    ``rates`` optionally maps maturity to a maturity-specific discount rate
    (e.g. estimated from put-call parity); otherwise ``mkt.rate`` is used.
    """

    quotes: tuple
    mkt: MarketState
    rates: Optional[dict] = None

    def __post_init__(self):
        quotes = tuple(self.quotes)
        if not quotes:
            raise InvalidInputError("quote set is empty")
        for q in quotes:
            q.opt.tau(self.mkt)
        object.__setattr__(self, "quotes", quotes)

    @classmethod
    def from_prices(cls, mkt, strikes, maturity, prices, kind=OptionKind.CALL, half_spread=0.0):
        maturities = np.broadcast_to(np.asarray(maturity, dtype=float), np.shape(strikes))
        kinds = [kind] * len(strikes) if isinstance(kind, (str, OptionKind)) else list(kind)
        quotes = []
        for k, t, p, kd in zip(strikes, maturities, prices, kinds):
            quotes.append(Quote(OptionSpec(float(k), float(t), kd),
                                bid=float(p) - half_spread, ask=float(p) + half_spread, mid=float(p)))
        return cls(tuple(quotes), mkt)

    def __len__(self):
        return len(self.quotes)

    def __iter__(self):
        return iter(self.quotes)

    def rate_for(self, maturity):
        if self.rates and maturity in self.rates:
            return float(self.rates[maturity])
        return self.mkt.rate

    @property
    def strikes(self):
        return np.array([q.opt.strike for q in self.quotes])

    @property
    def maturities(self):
        return np.array([q.opt.maturity for q in self.quotes])

    @property
    def taus(self):
        return self.maturities - self.mkt.time_now

    @property
    def rate_vector(self):
        return np.array([self.rate_for(q.opt.maturity) for q in self.quotes])

    @property
    def mids(self):
        return np.array([q.mid for q in self.quotes])

    @property
    def bids(self):
        return np.array([q.bid for q in self.quotes])

    @property
    def asks(self):
        return np.array([q.ask for q in self.quotes])

    @property
    def is_call(self):
        return np.array([q.opt.kind is OptionKind.CALL for q in self.quotes])

    @property
    def labels(self):
        return [q.label for q in self.quotes]

    def subset(self, mask):
        kept = tuple(q for q, keep in zip(self.quotes, mask) if keep)
        return QuoteSet(kept, self.mkt, self.rates)


@dataclass(frozen=True)
class ModelMatrix:
    """``entries[i, j]`` is the model price of quote ``i`` at state ``grid.points[j]``."""

    entries: np.ndarray
    grid: StateGrid
    quotes: Optional[QuoteSet] = None
    params: Optional[ModelParams] = None
    model: Optional[ModelKind] = None
    labels: tuple = field(default=())

    def __post_init__(self):
        arr = np.array(self.entries, dtype=float, copy=True)
        if arr.ndim != 2:
            raise InvalidInputError("matrix entries must be two-dimensional")
        if arr.shape[1] != self.grid.size:
            raise InvalidInputError("matrix columns do not match grid size")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)
        if not self.labels and self.quotes is not None:
            object.__setattr__(self, "labels", tuple(self.quotes.labels))

    @property
    def shape(self):
        return self.entries.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


def _price_columns(params, quotes: QuoteSet, states, model: ModelKind):
    spot = quotes.mkt.spot
    strikes, taus, rates = quotes.strikes, quotes.taus, quotes.rate_vector
    if model is ModelKind.BLACK_SCHOLES:
        calls = bs_call_prices(spot, strikes, taus, rates, states)
    else:
        if params is None:
            raise InvalidInputError("Heston matrices need model parameters")
        if model is ModelKind.HESTON:
            params = params.without_jumps()
        elif params.jumps is None:
            raise InvalidInputError("heston_jumps model requires jump parameters")
        calls = heston_call_prices(params, spot, strikes, taus, rates, states)
    puts = ~quotes.is_call
    if puts.any():
        parity = spot - strikes * np.exp(-rates * taus)
        calls[puts] = np.maximum(calls[puts] - parity[puts, None], 0.0)
    return calls


def build_matrix(params: Optional[ModelParams], quotes: QuoteSet, grid: StateGrid,
                 model="heston") -> ModelMatrix:
    """Model prices of every quote at every grid state.

    Raises
    ------
    NumericFailureError
        When pricing fails; ``indices`` lists the failing (row, column) pairs
        when they can be isolated.
    """
    model = ModelKind(model)
    if grid.state_meaning != model.state_meaning:
        raise InvalidInputError(
            f"{model.value} matrices need a {model.state_meaning} grid, got {grid.state_meaning}"
        )
    try:
        entries = _price_columns(params, quotes, grid.points, model)
    except NumericFailureError as exc:
        failing = []
        for j, x in enumerate(grid.points):
            for i in range(len(quotes)):
                try:
                    _price_columns(params, quotes.subset(np.arange(len(quotes)) == i),
                                   np.array([x]), model)
                except NumericFailureError:
                    failing.append((i, j))
        raise NumericFailureError(
            f"pricing failed at entries {failing[:10]}", achieved=exc.achieved, indices=failing
        ) from exc
    return ModelMatrix(entries, grid, quotes, params, model)


@dataclass(frozen=True)
class ConditionReport:
    singular_values: np.ndarray
    rank: int
    cond: float
    effective_rank: int

    def as_dict(self):
        return {
            "singular_values": [float(s) for s in self.singular_values],
            "rank": self.rank,
            "cond": self.cond,
            "effective_rank": self.effective_rank,
        }


def condition_diagnostics(C, rank_tol: Optional[float] = None) -> ConditionReport:
    """Singular values, numerical rank, condition number and elbow index.

    ``rank_tol`` is relative to the largest singular value; the default is
    ``max(M, H) * machine epsilon``. The effective rank is the ``k`` maximizing
    ``log10(s_k / s_{k+1})``.
    """
    A = np.asarray(C, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise InvalidInputError("matrix must be two-dimensional and nonempty")
    sv = np.linalg.svd(A, compute_uv=False)
    if rank_tol is None:
        rank_tol = max(A.shape) * np.finfo(float).eps
    smax = sv[0]
    rank = int(np.sum(sv > rank_tol * smax)) if smax > 0 else 0
    cond = float(smax / sv[-1]) if sv[-1] > 0 else math.inf
    if sv.size < 2 or smax == 0:
        eff = int(sv.size if smax > 0 else 0)
    else:
        floor = np.finfo(float).tiny
        logs = np.log10(np.maximum(sv, floor))
        gaps = logs[:-1] - logs[1:]
        eff = int(np.argmax(gaps)) + 1
    return ConditionReport(sv, rank, cond, eff)


def write_matrix_csv(matrix: ModelMatrix, path_or_buf=None):
    """CSV with a one-line ``#`` header carrying grid and quote identifiers."""
    grid = ";".join(f"{x:.12g}" for x in matrix.grid.points)
    labels = ";".join(matrix.labels) if matrix.labels else ""
    model = matrix.model.value if matrix.model is not None else ""
    header = f"# model={model} state={matrix.grid.state_meaning} grid={grid} quotes={labels}\n"
    body = io.StringIO()
    np.savetxt(body, matrix.entries, delimiter=",", fmt="%.12g")
    text = header + body.getvalue()
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)
    return None


def read_matrix_csv(path_or_buf) -> ModelMatrix:
    if hasattr(path_or_buf, "read"):
        text = path_or_buf.read()
    elif isinstance(path_or_buf, str) and "\n" in path_or_buf:
        text = path_or_buf
    else:
        with open(path_or_buf) as fh:
            text = fh.read()
    header, _, body = text.partition("\n")
    if not header.startswith("#"):
        raise InvalidInputError("matrix CSV must start with a '#' header line")
    fields = dict(tok.split("=", 1) for tok in header[1:].split() if "=" in tok)
    points = [float(v) for v in fields["grid"].split(";") if v]
    grid = StateGrid(np.array(points), fields.get("state", "variance"))
    entries = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    labels = tuple(v for v in fields.get("quotes", "").split(";") if v)
    model = ModelKind(fields["model"]) if fields.get("model") else None
    return ModelMatrix(entries, grid, model=model, labels=labels)
