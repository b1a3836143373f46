"""Encounter histories and forward-algorithm likelihoods.

Two evaluation paths exist.  :func:`forward_loglik_individual` multiplies the
dense masked matrices from :mod:`smas.statespace` and is the reference
implementation.  :func:`loglik_per_history` / :func:`joint_loglik` run the
batched kernels from :mod:`smas.kernels`, which exploit the block structure
and are what fitting uses.  :func:`brute_force_loglik` enumerates hidden
paths and is only meant as an oracle for small instances.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from . import statespace as ss

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10**7


class HistoryError(ValueError):
    pass


class TooLargeError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncounterHistory:
    """One individual's symbols over occasions ``0..T-1`` (codes from :mod:`smas.statespace`)."""

    symbols: tuple
    id: str | None = None

    def __post_init__(self):
        sym = tuple(int(x) for x in self.symbols)
        object.__setattr__(self, "symbols", sym)
        nz = [i for i, x in enumerate(sym) if x != ss.UNSEEN]
        if not nz:
            raise HistoryError(f"history {self.id!r} has no sighting")
        if not ss.is_sighting(sym[nz[0]]):
            raise HistoryError(f"history {self.id!r}: first symbol must be a live sighting")
        deaths = [i for i, x in enumerate(sym) if x == ss.DEAD]
        if len(deaths) > 1:
            raise HistoryError(f"history {self.id!r}: more than one recovery")
        if deaths and any(x != ss.UNSEEN for x in sym[deaths[0] + 1:]):
            raise HistoryError(f"history {self.id!r}: symbols after recovery")
        for x in sym:
            if x < ss.DEAD:
                raise HistoryError(f"history {self.id!r}: invalid symbol {x}")

    @property
    def first(self) -> int:
        """Occasion of first capture (0-based)."""
        for i, x in enumerate(self.symbols):
            if x != ss.UNSEEN:
                return i
        raise AssertionError("unreachable")

    @property
    def n_occasions(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True, eq=False)
class Dataset:
    histories: tuple
    n_occasions: int
    n_states: int
    _obs: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        hs = tuple(self.histories)
        object.__setattr__(self, "histories", hs)
        if not hs:
            raise HistoryError("dataset is empty")
        for h in hs:
            if h.n_occasions != self.n_occasions:
                raise HistoryError(
                    f"history {h.id!r} has {h.n_occasions} occasions, expected {self.n_occasions}"
                )
            if max(h.symbols) > self.n_states:
                raise HistoryError(f"history {h.id!r} uses a state beyond K={self.n_states}")
        obs = np.array([h.symbols for h in hs], dtype=np.int64)
        obs.setflags(write=False)
        object.__setattr__(self, "_obs", obs)

    @classmethod
    def from_array(cls, obs, n_states: int, ids=None) -> "Dataset":
        obs = np.asarray(obs, dtype=np.int64)
        ids = ids if ids is not None else [None] * len(obs)
        return cls(tuple(EncounterHistory(tuple(row), i) for row, i in zip(obs, ids)),
                   obs.shape[1], n_states)

    @property
    def obs(self) -> np.ndarray:
        return self._obs

    @property
    def first(self) -> np.ndarray:
        return np.argmax(self._obs != ss.UNSEEN, axis=1)

    @property
    def ids(self) -> list:
        return [h.id for h in self.histories]

    def __len__(self):
        return len(self.histories)


# -- reference forward path ----------------------------------------------------------

def _check_history(history, params):
    if history.n_occasions != params.n_occasions:
        raise HistoryError("history length does not match the number of occasions")
    for x in history.symbols:
        ss.check_symbol(x, params.n_states)


def forward_loglik_individual(history: EncounterHistory, params: ss.ModelParams,
                              plan: ss.AggregationPlan, ordering: str = "generative",
                              scale_every: int = 1) -> float:
    """Log-likelihood of one history, conditional on its first capture.

    ``ordering="generative"`` applies ``Q(x_{t+1})`` after each transition
    ``Gamma_t(x_t, x_{t+1})``; the first observation is absorbed into the
    initial vector.  ``ordering="literal"`` multiplies ``Gamma_t Q_t(x_t)`` in
    the order the product is usually printed, for comparison only.  Returns
    ``-inf`` for an impossible history.
    """
    _check_history(history, params)
    if ordering not in ("generative", "literal"):
        raise ValueError("ordering must be 'generative' or 'literal'")
    x = history.symbols
    t0 = history.first
    v = ss.initial_distribution(params.init_mode, x[t0], t0, params, plan)
    logscale = 0.0
    T = params.n_occasions
    for step, t in enumerate(range(t0, T - 1), start=1):
        G = ss.build_tpm(t, x[t], x[t + 1], params, plan)
        q = ss.obs_diagonal(t + 1 if ordering == "generative" else t,
                            x[t + 1] if ordering == "generative" else x[t], params, plan)
        v = (v @ G) * q
        if step % scale_every == 0:
            s = v.sum()
            if not s > 0:
                return -math.inf
            logscale += math.log(s)
            v = v / s
    s = v.sum()
    if not s > 0:
        return -math.inf
    return logscale + math.log(s)


# -- brute-force oracle --------------------------------------------------------------

def _state_transition(t, params, plan):
    """Unmasked f(s'|s) over expanded states, built entry by entry from the model definition."""
    n = plan.n_live
    size = plan.total
    f = np.zeros((size, size))
    for j in range(plan.n_states):
        c = [params.dwell[j].hazard(r) for r in range(1, plan.sizes[j] + 1)]
        phi = params.phi[t, j]
        for r in range(plan.sizes[j]):
            src = plan.offsets[j] + r
            dst_stay = src + 1 if r < plan.sizes[j] - 1 else src
            f[src, dst_stay] += phi * (1.0 - c[r])
            for k in range(plan.n_states):
                if plan.n_states == 1 or k != j:
                    f[src, plan.offsets[k]] += phi * c[r] * params.psi_star[t, j, k]
            f[src, n] = 1.0 - phi
    f[n, n + 1] = 1.0
    f[n + 1, n + 1] = 1.0
    return f


def _obs_prob(t, x, s, params, plan):
    n = plan.n_live
    if s == n:
        return {ss.UNSEEN: 1.0 - params.lam[t], ss.DEAD: params.lam[t]}.get(x, 0.0)
    if s == n + 1:
        return 1.0 if x == ss.UNSEEN else 0.0
    k = int(plan.state_of_position()[s])
    p, a = params.p[t, k], params.alpha[t, k]
    if x == ss.UNSEEN:
        return 1.0 - p
    if x == ss.UNKNOWN:
        return p * (1.0 - a)
    if x == k + 1:
        return p * a
    return 0.0


def brute_force_loglik(history: EncounterHistory, params: ss.ModelParams,
                       plan: ss.AggregationPlan, order: str = "depth") -> float:
    """Sum over every expanded hidden path after first capture.

    ``order="depth"`` walks paths depth-first, pruning zero-probability
    prefixes; ``order="product"`` enumerates the full Cartesian product.
    """
    _check_history(history, params)
    x = history.symbols
    t0 = history.first
    T = params.n_occasions
    steps = T - 1 - t0
    if plan.total ** steps > BRUTE_FORCE_LIMIT:
        raise TooLargeError(f"{plan.total}^{steps} paths exceed the enumeration limit")
    pi = ss.initial_distribution(params.init_mode, x[t0], t0, params, plan)
    trans = [_state_transition(t, params, plan) for t in range(t0, T - 1)]
    emit = [
        np.array([_obs_prob(t, x[t], s, params, plan) for s in range(plan.total)])
        for t in range(t0 + 1, T)
    ]
    if order == "product":
        total = 0.0
        starts = np.flatnonzero(pi > 0)
        for s0 in starts:
            for path in itertools.product(range(plan.total), repeat=steps):
                prob = pi[s0]
                prev = s0
                for i, s in enumerate(path):
                    prob *= trans[i][prev, s] * emit[i][s]
                    if prob == 0.0:
                        break
                    prev = s
                total += prob
    elif order == "depth":
        def walk(i, prev, prob):
            if i == steps:
                return prob
            acc = 0.0
            row = trans[i][prev]
            for s in np.flatnonzero(row):
                q = prob * row[s] * emit[i][s]
                if q > 0.0:
                    acc += walk(i + 1, s, q)
            return acc
        total = sum(walk(0, s0, pi[s0]) for s0 in np.flatnonzero(pi > 0))
    else:
        raise ValueError("order must be 'depth' or 'product'")
    return math.log(total) if total > 0 else -math.inf


# -- batched kernel path -------------------------------------------------------------

def kernel_inputs(params: ss.ModelParams, plan: ss.AggregationPlan):
    """Per-position stay/leave probabilities shared by every history."""
    ss.check_consistent(params, plan)
    c = ss.position_hazards(params, plan)
    return 1.0 - c, c


def initial_vectors(obs, first, params, plan):
    """Live part of the initial vector of each history (cached by first occasion and symbol)."""
    n = plan.n_live
    out = np.empty((len(first), n))
    cache = {}
    sym = obs[np.arange(len(first)), first]
    time_varying = params.init_mode == "stationary" and not np.all(
        params.psi_star == params.psi_star[:1]
    )
    for i, (t0, x0) in enumerate(zip(first.tolist(), sym.tolist())):
        key = (t0, x0) if time_varying else (0, x0)
        vec = cache.get(key)
        if vec is None:
            vec = ss.initial_distribution(params.init_mode, x0, t0, params, plan)[:n]
            cache[key] = vec
        out[i] = vec
    return out


def _compress(obs):
    uniq, inverse, counts = np.unique(obs, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


def loglik_per_history(dataset: Dataset, params: ss.ModelParams, plan: ss.AggregationPlan,
                       backend: str | None = None) -> np.ndarray:
    """Log-likelihood of every history, in dataset order."""
    if dataset.n_occasions != params.n_occasions or dataset.n_states != params.n_states:
        raise HistoryError("dataset dimensions do not match the parameters")
    uniq, inverse, _ = _compress(dataset.obs)
    first = np.argmax(uniq != ss.UNSEEN, axis=1)
    stay, leave = kernel_inputs(params, plan)
    init = initial_vectors(uniq, first, params, plan)
    ll = kernels.forward_loglik(
        uniq, first, init, np.asarray(plan.sizes, dtype=np.int64), stay, leave,
        params.phi, params.psi_star, params.p, params.alpha, params.lam, backend=backend,
    )
    return np.asarray(ll)[inverse]


class JointLoglik(NamedTuple):
    value: float
    per_history: np.ndarray
    impossible: list


def joint_loglik(dataset: Dataset, params: ss.ModelParams, plan: ss.AggregationPlan,
                 backend: str | None = None, details: bool = False):
    """Sum of individual log-likelihoods in history order.

    Impossible histories make the result ``-inf``; their ids are logged and
    returned when ``details=True``.
    """
    ll = loglik_per_history(dataset, params, plan, backend)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        ids = [dataset.histories[i].id if dataset.histories[i].id is not None else int(i)
               for i in bad]
        log.debug("impossible histories under current parameters: %s", ids[:20])
        value = -math.inf
    else:
        ids = []
        value = 0.0
        for v in ll.tolist():
            value += v
    if details:
        return JointLoglik(value, ll, ids)
    return value
