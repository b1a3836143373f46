"""Dwell-time distributions on {1, 2, ...} and their hazard functions.

A dwell time is the number of consecutive occasions an individual spends in
one covariate state.  Each family below exposes its p.m.f., c.d.f., survival
function and the hazard ``c(r) = d(r) / (1 - F(r - 1))`` that drives the
state-aggregate expansion in :mod:`smas.statespace`.

All p.m.f.s are evaluated in log space.  Survival functions use regularized
incomplete gamma/beta functions so that far-tail probabilities keep their
relative precision.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

#: ``1 - F(r - 1)`` below this is treated as exhausted support (hazard = 1).
EXHAUSTED_TOL = 1e-14
DEFAULT_EPSILON = 1e-6
DEFAULT_MAX_SIZE = 200


class DwellValidationError(ValueError):
    pass


class TruncationWarning(UserWarning):
    """The truncation scan hit its hard cap before the tail tolerance was met."""


def _check_prob(name, value):
    if not (0.0 < value < 1.0) or not math.isfinite(value):
        raise DwellValidationError(f"{name} must lie strictly in (0, 1), got {value!r}")


def _check_positive(name, value):
    if not (value > 0.0) or not math.isfinite(value):
        raise DwellValidationError(f"{name} must be strictly positive, got {value!r}")


def _as_support(r):
    arr = np.asarray(r)
    if arr.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DwellValidationError("dwell times must be integers")
        arr = arr.astype(np.int64)
    return arr


class DwellSpec:
    """Base class; subclasses are frozen dataclasses holding natural-scale parameters."""

    family: str = ""

    # -- family-specific pieces -------------------------------------------------
    def _logpmf(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _sf(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- public API -------------------------------------------------------------
    def logpmf(self, r):
        r = _as_support(r)
        if np.any(r < 1):
            raise DwellValidationError("dwell time must be >= 1")
        out = self._logpmf(np.asarray(r, dtype=np.int64))
        return out[()] if np.ndim(out) == 0 else out

    def pmf(self, r):
        return np.exp(self.logpmf(r))

    def sf(self, r):
        """``1 - F(r)``; ``sf(0) = 1``."""
        r = _as_support(r)
        if np.any(r < 0):
            raise DwellValidationError("cdf argument must be >= 0")
        r = np.asarray(r, dtype=np.int64)
        out = np.where(r == 0, 1.0, self._sf(np.maximum(r, 1)))
        return out[()] if np.ndim(out) == 0 else out

    def cdf(self, r):
        r = _as_support(r)
        if np.any(r < 0):
            raise DwellValidationError("cdf argument must be >= 0")
        r = np.asarray(r, dtype=np.int64)
        out = np.where(r == 0, 0.0, 1.0 - self._sf(np.maximum(r, 1)))
        return out[()] if np.ndim(out) == 0 else out

    def hazard(self, r):
        r = _as_support(r)
        if np.any(r < 1):
            raise DwellValidationError("dwell time must be >= 1")
        r = np.asarray(r, dtype=np.int64)
        surv = np.asarray(self.sf(r - 1), dtype=float)
        d = np.asarray(self.pmf(r), dtype=float)
        exhausted = surv < EXHAUSTED_TOL
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(exhausted, 1.0, d / np.where(exhausted, 1.0, surv))
        c = np.clip(c, 0.0, 1.0)
        return c[()] if np.ndim(c) == 0 else c

    def mean(self) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def label(self, digits: int = 3) -> str:
        """Compact notation such as ``sNB(0.581,0.017)``."""
        raise NotImplementedError


@dataclass(frozen=True)
class Geometric(DwellSpec):
    theta: float
    family = "geom"

    def __post_init__(self):
        _check_prob("theta", self.theta)

    def _logpmf(self, r):
        return math.log(self.theta) + (r - 1) * math.log1p(-self.theta)

    def _sf(self, r):
        return np.exp(r * math.log1p(-self.theta))

    def hazard(self, r):
        r = _as_support(r)
        if np.any(r < 1):
            raise DwellValidationError("dwell time must be >= 1")
        # memoryless: exact constant hazard, no rounding from d / sf
        out = np.full(np.shape(r), float(self.theta))
        return out[()] if np.ndim(out) == 0 else out

    def mean(self):
        return 1.0 / self.theta

    def to_dict(self):
        return {"family": "geom", "theta": self.theta}

    def label(self, digits=3):
        return f"geom({self.theta:.{digits}f})"


@dataclass(frozen=True)
class ShiftedPoisson(DwellSpec):
    """``1 + Poisson(mu)``; ``mu`` is the mean of the unshifted variable."""

    mu: float
    family = "poisson"

    def __post_init__(self):
        _check_positive("mu", self.mu)

    def _logpmf(self, r):
        return -self.mu + (r - 1) * math.log(self.mu) - special.gammaln(r)

    def _sf(self, r):
        # P(R > r) = P(X >= r) for X ~ Poisson(mu)
        return special.gammainc(r.astype(float), self.mu)

    def mean(self):
        return 1.0 + self.mu

    def to_dict(self):
        return {"family": "poisson", "mu": self.mu}

    def label(self, digits=3):
        return f"sPois({self.mu:.{digits}f})"


@dataclass(frozen=True)
class ShiftedNegBinomial(DwellSpec):
    """``1 + NB(nu, theta)``: ``r - 1`` failures before ``nu`` successes.

    ``nu`` may be real-valued; ``nu = 1`` is the geometric distribution.
    """

    nu: float
    theta: float
    family = "snb"

    def __post_init__(self):
        _check_positive("nu", self.nu)
        _check_prob("theta", self.theta)

    def _logpmf(self, r):
        nu = self.nu
        return (
            special.gammaln(r + nu - 1.0)
            - special.gammaln(nu)
            - special.gammaln(r)
            + nu * math.log(self.theta)
            + (r - 1) * math.log1p(-self.theta)
        )

    def _sf(self, r):
        # P(R > r) = P(X >= r) = I_{1-theta}(r, nu)
        return special.betainc(r.astype(float), self.nu, 1.0 - self.theta)

    def mean(self):
        return 1.0 + self.nu * (1.0 - self.theta) / self.theta

    def to_dict(self):
        return {"family": "snb", "nu": self.nu, "theta": self.theta}

    def label(self, digits=3):
        return f"sNB({self.nu:.{digits}f},{self.theta:.{digits}f})"


@dataclass(frozen=True)
class TabulatedPMF(DwellSpec):
    """Free p.m.f. over ``r = 1..R`` with an optional geometric tail.

    Mass ``1 - sum(probs)`` is spread over ``r > R`` geometrically with rate
    ``tail_rate``; by default the rate is the hazard at the last table entry.
    """

    probs: tuple
    tail_rate: float | None = None
    _rate: float = field(init=False, repr=False, compare=False, default=0.0)
    _cum: np.ndarray = field(init=False, repr=False, compare=False, default=None)
    family = "table"

    def __post_init__(self):
        probs = tuple(float(x) for x in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise DwellValidationError("tabulated p.m.f. needs at least one entry")
        arr = np.asarray(probs)
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise DwellValidationError("tabulated probabilities must be nonnegative")
        total = math.fsum(probs)
        if total > 1.0 + 1e-12:
            raise DwellValidationError(f"tabulated probabilities sum to {total} > 1")
        tail = max(0.0, 1.0 - total)
        rate = self.tail_rate
        if tail > 1e-12:
            if rate is None:
                before_last = 1.0 - math.fsum(probs[:-1])
                rate = probs[-1] / before_last if before_last > 0 else 0.0
            if not (0.0 < rate <= 1.0):
                raise DwellValidationError(
                    "tail mass is positive but the geometric tail rate is not in (0, 1]"
                )
        else:
            rate = 1.0 if rate is None else rate
        object.__setattr__(self, "_rate", float(rate))
        object.__setattr__(self, "_cum", np.cumsum(arr))

    @property
    def tail_mass(self) -> float:
        return max(0.0, 1.0 - math.fsum(self.probs))

    @property
    def support_max(self) -> int | None:
        """Largest r with positive mass, or None when the tail is infinite."""
        if self.tail_mass > 1e-12:
            return None
        nz = np.flatnonzero(np.asarray(self.probs) > 0)
        return int(nz[-1]) + 1

    def _logpmf(self, r):
        R = len(self.probs)
        table = np.asarray(self.probs)
        r1 = np.atleast_1d(r)
        out = np.full(r1.shape, -np.inf)
        inside = r1 <= R
        with np.errstate(divide="ignore"):
            out[inside] = np.log(table[r1[inside] - 1])
            m, q = self.tail_mass, self._rate
            if m > 0:
                k = r1[~inside] - R - 1
                log_stay = math.log1p(-q) if q < 1 else -np.inf
                later = np.where(k > 0, k * log_stay if q < 1 else -np.inf, 0.0)
                out[~inside] = math.log(m * q) + later
        return out.reshape(np.shape(r))

    def _sf(self, r):
        R = len(self.probs)
        idx = np.minimum(r, R) - 1
        inside = np.maximum(0.0, 1.0 - self._cum[idx])
        m, q = self.tail_mass, self._rate
        if m > 0:
            beyond = m * (1.0 - q) ** np.maximum(r - R, 0)
        else:
            beyond = np.zeros(np.shape(r))
        return np.where(r <= R, inside, beyond)

    def mean(self):
        R = len(self.probs)
        head = sum((i + 1) * p for i, p in enumerate(self.probs))
        m, q = self.tail_mass, self._rate
        return head + (m * (R + 1.0 / q) if m > 0 else 0.0)

    def to_dict(self):
        out = {"family": "table", "probs": list(self.probs)}
        if self.tail_rate is not None:
            out["tail_rate"] = self.tail_rate
        return out

    def label(self, digits=3):
        body = ",".join(f"{p:.{digits}f}" for p in self.probs)
        return f"table({body})"


FAMILIES = {
    "geom": Geometric,
    "geometric": Geometric,
    "poisson": ShiftedPoisson,
    "spois": ShiftedPoisson,
    "snb": ShiftedNegBinomial,
    "negbin": ShiftedNegBinomial,
    "table": TabulatedPMF,
}

#: natural-scale parameter names per canonical family
PARAM_NAMES = {
    "geom": ("theta",),
    "poisson": ("mu",),
    "snb": ("nu", "theta"),
    "table": ("probs",),
}


def from_dict(data: dict) -> DwellSpec:
    """Build a spec from the JSON grammar, e.g. ``{"family": "snb", "nu": 4, "theta": 0.4}``."""
    data = dict(data)
    try:
        fam = str(data.pop("family")).lower()
    except KeyError:
        raise DwellValidationError("dwell spec needs a 'family' key") from None
    data.pop("fixed", None)
    cls = FAMILIES.get(fam)
    if cls is None:
        raise DwellValidationError(f"unknown dwell family {fam!r}")
    allowed = set(PARAM_NAMES[cls.family]) | ({"tail_rate"} if cls is TabulatedPMF else set())
    unknown = set(data) - allowed
    if unknown:
        raise DwellValidationError(f"unknown keys for {fam}: {sorted(unknown)}")
    missing = set(PARAM_NAMES[cls.family]) - set(data)
    if missing:
        raise DwellValidationError(f"missing parameters for {fam}: {sorted(missing)}")
    if cls is TabulatedPMF:
        return TabulatedPMF(tuple(data["probs"]), data.get("tail_rate"))
    return cls(**{k: float(v) for k, v in data.items()})


# -- operations ------------------------------------------------------------------

def pmf(spec: DwellSpec, r):
    return spec.pmf(r)


def cdf(spec: DwellSpec, r):
    return spec.cdf(r)


def hazard(spec: DwellSpec, r):
    return spec.hazard(r)


@dataclass(frozen=True)
class HazardTable:
    """Hazards ``c(1..a)`` of ``source`` truncated at ``a``."""

    values: np.ndarray
    source: DwellSpec

    @property
    def length(self) -> int:
        return len(self.values)

    def reconstruct(self) -> np.ndarray:
        """``c(r) * prod_{s<r} (1 - c(s))`` for ``r = 1..a``."""
        surv = np.concatenate(([1.0], np.cumprod(1.0 - self.values)[:-1]))
        return self.values * surv


def hazard_table(spec: DwellSpec, a: int) -> HazardTable:
    if a < 1:
        raise DwellValidationError("truncation point must be >= 1")
    values = np.asarray(spec.hazard(np.arange(1, a + 1)), dtype=float)
    return HazardTable(values, spec)


def truncation_point(spec: DwellSpec, epsilon: float = DEFAULT_EPSILON,
                     max_size: int = DEFAULT_MAX_SIZE) -> int:
    """Smallest ``a`` with ``1 - F(a) <= epsilon`` (geometric: always 1).

    Families whose hazard is exactly constant beyond some point are represented
    without error by an aggregate ending there, so that point is returned
    regardless of ``epsilon``.  Hitting ``max_size`` emits
    :class:`TruncationWarning` and returns the cap.
    """
    if isinstance(spec, Geometric):
        return 1
    if isinstance(spec, TabulatedPMF):
        if spec.support_max is not None:
            return spec.support_max
        return len(spec.probs) + 1
    if not (0.0 < epsilon < 1.0):
        raise DwellValidationError("epsilon must lie in (0, 1)")
    r = np.arange(1, max_size + 1)
    ok = np.flatnonzero(np.asarray(spec.sf(r)) <= epsilon)
    if ok.size == 0:
        warnings.warn(
            f"{spec.label()}: tail mass above {epsilon:g} at the cap a={max_size}",
            TruncationWarning,
            stacklevel=2,
        )
        return max_size
    return int(r[ok[0]])
