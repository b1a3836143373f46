"""Expanded state space of the semi-Markov Arnason-Schwarz model.

Each covariate state ``k`` is expanded into an aggregate of ``a_k`` Markov
states.  Position ``r`` of aggregate ``k`` means "``r`` occasions spent in
``k`` so far" (the last position absorbs every longer stay).  Two dead states
follow the live aggregates: recently dead and long dead.

Conventions used throughout the package:

* occasions are 0-based array indices ``0..T-1``;
* covariate states are 0-based array indices ``0..K-1``;
* observation symbols are integer codes: ``UNSEEN = 0``, ``k + 1`` for a
  sighting in state ``k``, ``UNKNOWN = -1`` for a sighting with unrecorded
  state, ``DEAD = -2`` for a dead recovery.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dwell as dw

UNSEEN = 0
UNKNOWN = -1
DEAD = -2

INIT_MODES = ("stationary", "estimated", "conditional")


class StateSpaceError(ValueError):
    pass


class StationaryError(StateSpaceError):
    """The restricted chain has no unique stationary distribution."""


# -- observation symbols / true states ------------------------------------------

def seen(k: int) -> int:
    """Symbol for a sighting in (0-based) state ``k``."""
    return k + 1


def is_sighting(x: int) -> bool:
    return x > 0 or x == UNKNOWN


def symbol_state(x: int) -> int | None:
    return x - 1 if x > 0 else None


def check_symbol(x: int, n_states: int) -> None:
    if x not in (UNSEEN, UNKNOWN, DEAD) and not (1 <= x <= n_states):
        raise StateSpaceError(f"invalid observation symbol {x} for K={n_states}")


def live_compatible(x: int, k: int) -> bool:
    """Can an individual observed as ``x`` be alive in state ``k``?"""
    return x == UNSEEN or x == UNKNOWN or x == k + 1


def recently_dead_index(plan: "AggregationPlan") -> int:
    return plan.n_live


def long_dead_index(plan: "AggregationPlan") -> int:
    return plan.n_live + 1


# -- aggregation -------------------------------------------------------------------

@dataclass(frozen=True)
class AggregationPlan:
    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(a) for a in self.sizes)
        if not sizes:
            raise StateSpaceError("need at least one state")
        if any(a < 1 for a in sizes):
            raise StateSpaceError(f"aggregate sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_states(self) -> int:
        return len(self.sizes)

    @property
    def offsets(self) -> tuple:
        return tuple(int(x) for x in np.concatenate(([0], np.cumsum(self.sizes)[:-1])))

    @property
    def n_live(self) -> int:
        return int(sum(self.sizes))

    @property
    def total(self) -> int:
        return self.n_live + 2

    def aggregate(self, k: int) -> slice:
        start = self.offsets[k]
        return slice(start, start + self.sizes[k])

    def state_of_position(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states), self.sizes)


def build_aggregation(dwell, epsilon: float = dw.DEFAULT_EPSILON, overrides=None,
                      max_size: int = dw.DEFAULT_MAX_SIZE) -> AggregationPlan:
    dwell = list(dwell)
    if not dwell:
        raise StateSpaceError("need at least one dwell spec")
    if overrides is not None:
        overrides = list(overrides)
        if len(overrides) != len(dwell):
            raise StateSpaceError("one size override per state expected")
    sizes = []
    for k, spec in enumerate(dwell):
        ov = None if overrides is None else overrides[k]
        if ov is not None:
            if int(ov) != ov or ov < 1:
                raise StateSpaceError(f"aggregate size override must be a positive integer, got {ov}")
            sizes.append(int(ov))
        else:
            sizes.append(dw.truncation_point(spec, epsilon, max_size))
    return AggregationPlan(tuple(sizes))


# -- parameters --------------------------------------------------------------------

def _prob_array(name, value, shape):
    arr = np.array(np.broadcast_to(np.asarray(value, dtype=float), shape))
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise StateSpaceError(f"{name} entries must be probabilities in [0, 1]")
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Natural-scale parameters for ``K`` states and ``T`` occasions.

    Shapes: ``phi`` (T-1, K) survival over interval t -> t+1; ``psi_star``
    (T-1, K, K) exit destinations with a zero diagonal; ``p`` and ``alpha``
    (T, K) per occasion; ``lam`` (T,) recovery of the recently dead.  Scalars
    and lower-rank inputs are broadcast.
    """

    phi: np.ndarray
    psi_star: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    dwell: tuple
    alpha: np.ndarray = None
    init_mode: str = "stationary"
    init_extra: np.ndarray | None = None
    renormalize: bool = True
    n_occasions: int = field(default=None)

    def __post_init__(self):
        dwell = tuple(self.dwell)
        K = len(dwell)
        if K < 1:
            raise StateSpaceError("need at least one dwell spec")
        T = self.n_occasions
        if T is None:
            T = np.shape(self.p)[0] if np.ndim(self.p) == 2 else np.shape(self.phi)[0] + 1
        T = int(T)
        if T < 2:
            raise StateSpaceError("need at least two occasions")
        s = object.__setattr__
        s(self, "dwell", dwell)
        s(self, "n_occasions", T)
        s(self, "phi", _prob_array("phi", self.phi, (T - 1, K)))
        s(self, "p", _prob_array("p", self.p, (T, K)))
        s(self, "lam", _prob_array("lambda", self.lam, (T,)))
        s(self, "alpha", _prob_array("alpha", 1.0 if self.alpha is None else self.alpha, (T, K)))
        psi = np.asarray(self.psi_star, dtype=float)
        if K == 1:
            psi = np.ones((T - 1, 1, 1))
        else:
            if psi.ndim == 2:
                psi = np.broadcast_to(psi, (T - 1, K, K))
            psi = np.array(psi, dtype=float)
            if psi.shape != (T - 1, K, K):
                raise StateSpaceError(f"psi_star must have shape (T-1, K, K), got {psi.shape}")
            idx = np.arange(K)
            if np.any(psi[:, idx, idx] != 0):
                raise StateSpaceError("psi_star must have a zero diagonal")
            if np.any(psi < 0) or np.any(psi > 1):
                raise StateSpaceError("psi_star entries must be probabilities")
            if psi.size and np.max(np.abs(psi.sum(axis=2) - 1.0)) > 1e-12:
                raise StateSpaceError("psi_star rows must sum to 1")
        s(self, "psi_star", psi)
        if self.init_mode not in INIT_MODES:
            raise StateSpaceError(f"init_mode must be one of {INIT_MODES}")
        if self.init_mode == "estimated":
            extra = np.asarray(self.init_extra, dtype=float)
            if extra.shape != (K,) or np.any(extra < 0) or abs(extra.sum() - 1) > 1e-12:
                raise StateSpaceError("init_extra must be a probability vector over K states")
            s(self, "init_extra", extra)

    @property
    def n_states(self) -> int:
        return len(self.dwell)

    def replace(self, **changes) -> "ModelParams":
        data = {
            "phi": self.phi, "psi_star": self.psi_star, "p": self.p, "lam": self.lam,
            "dwell": self.dwell, "alpha": self.alpha, "init_mode": self.init_mode,
            "init_extra": self.init_extra, "renormalize": self.renormalize,
            "n_occasions": self.n_occasions,
        }
        data.update(changes)
        return ModelParams(**data)


def check_consistent(params: ModelParams, plan: AggregationPlan) -> None:
    if plan.n_states != params.n_states:
        raise StateSpaceError(
            f"plan has {plan.n_states} aggregates but params have {params.n_states} states"
        )


def position_hazards(params: ModelParams, plan: AggregationPlan) -> np.ndarray:
    """Hazard of every live expanded position, concatenated over aggregates."""
    return np.concatenate(
        [dw.hazard_table(spec, a).values for spec, a in zip(params.dwell, plan.sizes)]
    )


# -- transition blocks ------------------------------------------------------------

def _hazards(params, plan, k):
    return dw.hazard_table(params.dwell[k], plan.sizes[k]).values


def block_open(j: int, k: int, obs_pair) -> bool:
    """Live block (j, k) is compatible with the observation pair."""
    x_t, x_next = obs_pair
    return live_compatible(x_t, j) and live_compatible(x_next, k)


def diag_block(k: int, t: int, params: ModelParams, plan: AggregationPlan,
               obs_pair=(UNSEEN, UNSEEN)) -> np.ndarray:
    a = plan.sizes[k]
    out = np.zeros((a, a))
    if not block_open(k, k, obs_pair):
        return out
    stay = 1.0 - _hazards(params, plan, k)
    idx = np.arange(a - 1)
    out[idx, idx + 1] = stay[:-1]
    out[a - 1, a - 1] = stay[-1]
    return out


def offdiag_block(j: int, k: int, t: int, params: ModelParams, plan: AggregationPlan,
                  obs_pair=(UNSEEN, UNSEEN)) -> np.ndarray:
    if j == k:
        raise StateSpaceError("offdiag_block needs j != k")
    out = np.zeros((plan.sizes[j], plan.sizes[k]))
    if not block_open(j, k, obs_pair):
        return out
    out[:, 0] = params.psi_star[t, j, k] * _hazards(params, plan, j)
    return out


def _renewal_block(params, plan, t, obs_pair):
    # K = 1: leaving the only state re-enters it at position 1
    out = np.zeros((plan.sizes[0], plan.sizes[0]))
    if block_open(0, 0, obs_pair):
        out[:, 0] = _hazards(params, plan, 0)
    return out


def restricted_matrix(t: int, params: ModelParams, plan: AggregationPlan,
                      obs_pair=(UNSEEN, UNSEEN)) -> np.ndarray:
    """Live-to-live transitions conditional on survival (no survival factors)."""
    check_consistent(params, plan)
    K = plan.n_states
    G = np.zeros((plan.n_live, plan.n_live))
    for j in range(K):
        rows = plan.aggregate(j)
        for k in range(K):
            cols = plan.aggregate(k)
            if j == k:
                G[rows, cols] = diag_block(k, t, params, plan, obs_pair)
            else:
                G[rows, cols] = offdiag_block(j, k, t, params, plan, obs_pair)
    if K == 1:
        G += _renewal_block(params, plan, t, obs_pair)
    return G


def build_tpm(t: int, x_t: int, x_next: int, params: ModelParams,
              plan: AggregationPlan) -> np.ndarray:
    """Observation-masked expanded transition matrix for interval ``t -> t+1``."""
    n = plan.n_live
    out = np.zeros((plan.total, plan.total))
    G = restricted_matrix(t, params, plan, (x_t, x_next))
    phi_pos = params.phi[t][plan.state_of_position()]
    out[:n, :n] = phi_pos[:, None] * G
    if x_next in (UNSEEN, DEAD):
        for k in range(plan.n_states):
            if live_compatible(x_t, k):
                rows = plan.aggregate(k)
                out[rows, n] = 1.0 - params.phi[t, k]
    out[n, n + 1] = 1.0
    out[n + 1, n + 1] = 1.0
    return out


def obs_diagonal(t: int, x: int, params: ModelParams, plan: AggregationPlan) -> np.ndarray:
    """Diagonal of the observation matrix at occasion ``t`` for symbol ``x``."""
    K = plan.n_states
    check_symbol(x, K)
    p, alpha, lam = params.p[t], params.alpha[t], params.lam[t]
    if x == UNSEEN:
        live, dead = 1.0 - p, (1.0 - lam, 1.0)
    elif x == UNKNOWN:
        live, dead = p * (1.0 - alpha), (0.0, 0.0)
    elif x == DEAD:
        live, dead = np.zeros(K), (lam, 0.0)
    else:
        live = np.zeros(K)
        live[x - 1] = p[x - 1] * alpha[x - 1]
        dead = (0.0, 0.0)
    return np.concatenate((np.repeat(live, plan.sizes), dead))


def build_obs_matrix(t: int, x: int, params: ModelParams, plan: AggregationPlan) -> np.ndarray:
    return np.diag(obs_diagonal(t, x, params, plan))


# -- stationary and initial distributions -----------------------------------------

def stationary_restricted(t: int, params: ModelParams, plan: AggregationPlan,
                          tol: float = 1e-9) -> np.ndarray:
    """Left eigenvector (eigenvalue 1) of the unmasked restricted chain at ``t``.

    ``t`` is clamped to the last interval so a first capture at the final
    occasion uses the final interval's exit probabilities.
    """
    G = restricted_matrix(min(t, params.n_occasions - 2), params, plan)
    return _solve_stationary(G, tol)


def _solve_stationary(G: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    n = G.shape[0]
    A = G.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
        cond = np.linalg.cond(A)
    except np.linalg.LinAlgError as exc:
        raise StationaryError(f"restricted chain is degenerate: {exc}") from None
    if not cond < 1e12:
        raise StationaryError(
            f"restricted chain has no unique stationary distribution (condition number {cond:.3g})"
        )
    resid = np.max(np.abs(pi @ G - pi)) if n else 0.0
    if not np.all(np.isfinite(pi)) or resid > tol or np.min(pi) < -1e-10:
        raise StationaryError(
            f"no unique stationary distribution (residual {resid:.3g}, min entry {np.min(pi):.3g})"
        )
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def within_aggregate_weights(spec: dw.DwellSpec, a: int) -> np.ndarray:
    """Stationary occupation of the positions of one aggregate.

    Entry is always at position 1, so position ``r < a`` is occupied in
    proportion to ``P(dwell >= r)`` and the absorbing last position in
    proportion to ``P(dwell >= a) / c(a)``.
    """
    c = dw.hazard_table(spec, a).values
    reach = np.concatenate(([1.0], np.cumprod(1.0 - c)[:-1]))
    w = reach.copy()
    if c[-1] <= 0:
        if reach[-1] > 0:
            raise StationaryError("last aggregate position never exits")
    else:
        w[-1] = reach[-1] / c[-1]
    return w / w.sum()


def initial_distribution(mode: str, observed_first: int, t0: int, params: ModelParams,
                         plan: AggregationPlan, renormalize: bool | None = None) -> np.ndarray:
    """Expanded initial vector at first capture (length ``a*``).

    ``renormalize`` (default from ``params``) only affects the ``stationary``
    mode with a known first state: when False the stationary mass on the
    observed aggregate is kept as is.
    """
    check_consistent(params, plan)
    K = plan.n_states
    check_symbol(observed_first, K)
    if not is_sighting(observed_first):
        raise StateSpaceError("first symbol must be a live sighting")
    if mode not in INIT_MODES:
        raise StateSpaceError(f"unknown init mode {mode!r}")
    if renormalize is None:
        renormalize = params.renormalize
    out = np.zeros(plan.total)
    k = symbol_state(observed_first)
    if mode == "stationary":
        full = stationary_restricted(t0, params, plan)
        if k is None:
            out[: plan.n_live] = full
        else:
            sl = plan.aggregate(k)
            block = full[sl]
            if renormalize:
                total = block.sum()
                if total <= 0:
                    raise StationaryError(f"stationary mass of state {k + 1} is zero")
                block = block / total
            out[sl] = block
        return out
    weights = [within_aggregate_weights(spec, a) for spec, a in zip(params.dwell, plan.sizes)]
    if mode == "conditional":
        if k is None:
            return initial_distribution("stationary", observed_first, t0, params, plan)
        out[plan.aggregate(k)] = weights[k]
        return out
    # estimated: state-level probabilities times within-aggregate weights;
    # a known first state keeps its probability so init_extra stays identifiable
    top = params.init_extra
    for j in range(K):
        if k is None or j == k:
            out[plan.aggregate(j)] = top[j] * weights[j]
    return out
