"""Simulation of capture-recapture-recovery data from a semi-Markov truth, and replicate studies."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dwell as dw
from . import inference as inf
from . import likelihood as lk
from . import statespace as ss
from ._parallel import ordered_map

log = logging.getLogger(__name__)

ENTRY_POLICIES = ("all_first", "uniform")
MAX_SIMULATED = 10**7
DEAD_PATH = -1  # path code for a dead individual; live states are 0..K-1, not yet entered is -2
NOT_ENTERED = -2


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class StudyDesign:
    n_individuals: int
    n_occasions: int
    truth: ss.ModelParams
    replicates: int = 1
    seed: int = 0
    entry_policy: str = "all_first"
    fresh_dwell: bool = True
    aggregation: inf.Aggregation = field(default_factory=inf.Aggregation)

    def __post_init__(self):
        if self.n_individuals < 1 or self.n_occasions < 2 or self.replicates < 1:
            raise ValueError("need N >= 1, T >= 2 and at least one replicate")
        if self.entry_policy not in ENTRY_POLICIES:
            raise ValueError(f"entry_policy must be one of {ENTRY_POLICIES}")
        if self.truth.n_occasions != self.n_occasions:
            raise ValueError("truth parameters do not match the number of occasions")


def replicate_rng(seed: int, replicate: int, batch: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, replicate, batch)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replicate, batch])))


def sample_dwell(spec: dw.DwellSpec, rng, size, at_least=None):
    """Exact draws from ``d``; with ``at_least`` draws from ``d`` conditioned on ``D >= at_least``."""
    if at_least is None:
        if spec.family == "geom":
            return rng.geometric(spec.theta, size)
        if spec.family == "poisson":
            return 1 + rng.poisson(spec.mu, size)
        if spec.family == "snb":
            return 1 + rng.negative_binomial(spec.nu, spec.theta, size)
        at_least = np.ones(size, dtype=np.int64)
    at_least = np.broadcast_to(np.asarray(at_least, dtype=np.int64), (size,))
    lo = spec.cdf(at_least - 1)
    u = lo + rng.random(size) * (1.0 - lo)
    out = np.array(at_least, dtype=np.int64)
    while True:
        short = spec.cdf(out) < u
        if not short.any():
            return out
        out[short] += 1


def _initial_state_probs(truth, plan):
    pi = ss.stationary_restricted(0, truth, plan)
    probs = np.array([pi[plan.aggregate(k)].sum() for k in range(plan.n_states)])
    return pi[: plan.n_live] / pi[: plan.n_live].sum(), probs / probs.sum()


def _simulate_batch(truth, plan, n, rng, entry, fresh_dwell):
    """Vectorized simulation of ``n`` individuals; returns (paths, observations)."""
    T = truth.n_occasions
    K = truth.n_states
    pos_probs, state_probs = _initial_state_probs(truth, plan)
    entry = np.broadcast_to(np.asarray(entry, dtype=np.int64), (n,))
    state = np.full(n, NOT_ENTERED, dtype=np.int64)
    remaining = np.zeros(n, dtype=np.int64)
    paths = np.full((n, T), NOT_ENTERED, dtype=np.int64)
    obs = np.zeros((n, T), dtype=np.int64)
    pos_state = plan.state_of_position()

    def start(idx):
        if fresh_dwell:
            s = rng.choice(K, size=idx.size, p=state_probs)
            state[idx] = s
            for k in range(K):
                sel = idx[s == k]
                remaining[sel] = sample_dwell(truth.dwell[k], rng, sel.size)
        else:
            pos = rng.choice(plan.n_live, size=idx.size, p=pos_probs)
            s = pos_state[pos]
            state[idx] = s
            elapsed = pos - np.asarray(plan.offsets)[s] + 1
            for k in range(K):
                m = s == k
                sel = idx[m]
                total = sample_dwell(truth.dwell[k], rng, sel.size, at_least=elapsed[m])
                remaining[sel] = total - elapsed[m] + 1

    def observe(t, idx):
        s = state[idx]
        seen = rng.random(idx.size) < truth.p[t, s]
        known = rng.random(idx.size) < truth.alpha[t, s]
        obs[idx[seen & known], t] = s[seen & known] + 1
        obs[idx[seen & ~known], t] = ss.UNKNOWN

    for t in range(T):
        if t > 0:
            alive = np.flatnonzero(state >= 0)
            s = state[alive]
            survive = rng.random(alive.size) < truth.phi[t - 1, s]
            died = alive[~survive]
            state[died] = DEAD_PATH
            recovered = died[rng.random(died.size) < truth.lam[t]]
            obs[recovered, t] = ss.DEAD
            stay = alive[survive]
            leaving = stay[remaining[stay] == 1]
            remaining[stay] -= 1
            if K == 1:
                remaining[leaving] = sample_dwell(truth.dwell[0], rng, leaving.size)
            else:
                src = state[leaving]
                u = rng.random(leaving.size)
                cum = np.cumsum(truth.psi_star[t - 1][src], axis=1)
                dest = np.minimum((u[:, None] > cum).sum(axis=1), K - 1)
                state[leaving] = dest
                for k in range(K):
                    sel = leaving[dest == k]
                    remaining[sel] = sample_dwell(truth.dwell[k], rng, sel.size)
            observe(t, alive[survive])
        entering = np.flatnonzero(entry == t)
        if entering.size:
            start(entering)
            observe(t, entering)
        paths[:, t] = state
    return paths, obs


def _seen_alive(obs):
    return np.any((obs > 0) | (obs == ss.UNKNOWN), axis=1)


def simulate_individual(truth: ss.ModelParams, plan: ss.AggregationPlan, T: int, entry: int,
                        rng, fresh_dwell: bool = True):
    """True state path and its history, or ``None`` for the history if never seen alive.

    Path codes: ``0..K-1`` alive in that state, ``-1`` dead, ``-2`` not yet entered.
    """
    if T != truth.n_occasions:
        raise ValueError("T does not match the truth parameters")
    paths, obs = _simulate_batch(truth, plan, 1, rng, entry, fresh_dwell)
    if not _seen_alive(obs)[0]:
        return paths[0], None
    return paths[0], lk.EncounterHistory(tuple(obs[0]))


def _draw_entries(design, rng, n):
    if design.entry_policy == "all_first":
        return np.zeros(n, dtype=np.int64)
    return rng.integers(0, design.n_occasions, n)


def simulate_dataset(design: StudyDesign, replicate: int = 0, return_paths: bool = False):
    """Dataset of ``N`` individuals seen alive at least once, reproducible from (seed, replicate)."""
    truth = design.truth
    if np.all(truth.p == 0):
        raise SimulationError("detection probability is zero everywhere; no individual can be seen")
    plan = design.aggregation.plan_for(truth.dwell)
    N = design.n_individuals
    kept_obs, kept_paths = [], []
    n_kept = 0
    simulated = 0
    batch = 0
    rate = 1.0
    while n_kept < N:
        need = N - n_kept
        size = int(min(MAX_SIMULATED, max(need, math.ceil(1.2 * need / max(rate, 1e-6)))))
        rng = replicate_rng(design.seed, replicate, batch)
        entries = _draw_entries(design, rng, size)
        paths, obs = _simulate_batch(truth, plan, size, rng, entries, design.fresh_dwell)
        keep = _seen_alive(obs)
        simulated += size
        batch += 1
        got = int(keep.sum())
        if got:
            kept_obs.append(obs[keep][:need])
            kept_paths.append(paths[keep][:need])
            n_kept += min(got, need)
        rate = max(n_kept, 1) / simulated
        if simulated > MAX_SIMULATED and n_kept < N:
            raise SimulationError(
                f"only {n_kept} of {N} individuals seen after simulating {simulated}"
            )
    obs = np.vstack(kept_obs)
    ids = [f"r{replicate}i{i + 1}" for i in range(N)]
    data = lk.Dataset.from_array(obs, truth.n_states, ids)
    if return_paths:
        return data, np.vstack(kept_paths)
    return data


# -- replicate studies ----------------------------------------------------------------

@dataclass
class StudyRow:
    map_label: str
    parameter: str
    truth: float
    mrb: float
    sd: float
    mean_se: float
    n_ok: int


@dataclass
class StudyResult:
    rows: list
    n_failed: dict
    estimates: dict = field(repr=False, default_factory=dict)

    def table(self, map_label=None):
        return [r for r in self.rows if map_label is None or r.map_label == map_label]

    def to_csv(self) -> str:
        lines = ["parameter,map,truth,MRB,MSD_sd,MSD_mean_se,n_ok"]
        for r in self.rows:
            lines.append(f"{r.parameter},{r.map_label},{_fmt(r.truth)},{_fmt(r.mrb)},"
                         f"{_fmt(r.sd)},{_fmt(r.mean_se)},{r.n_ok}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = []
        for label in dict.fromkeys(r.map_label for r in self.rows):
            out.append(f"[{label}]  failed fits: {self.n_failed.get(label, 0)}")
            out.append(f"{'parameter':<14}{'truth':>10}{'MRB':>10}{'SD':>10}{'mean SE':>10}")
            for r in self.table(label):
                out.append(f"{r.parameter:<14}{_fmt(r.truth):>10}{_fmt(r.mrb):>10}"
                           f"{_fmt(r.sd):>10}{_fmt(r.mean_se):>10}")
        return "\n".join(out) + "\n"


def _fmt(x):
    return "nan" if not math.isfinite(x) else f"{x:.4f}"


def _truth_value(qty, truth):
    try:
        return float(qty.fn(truth))
    except (inf.MapError, IndexError, TypeError, AttributeError):
        return math.nan


def _study_replicate(args):
    design, maps, options, replicate = args
    data = simulate_dataset(design, replicate)
    out = []
    for label, pmap, agg in maps:
        try:
            res = inf.fit(data, pmap, options, agg)
        except (inf.FitError, ss.StationaryError) as exc:
            log.warning("replicate %d, map %s failed: %s", replicate, label, exc)
            out.append(None)
            continue
        if not res.converged:
            log.warning("replicate %d, map %s did not converge", replicate, label)
            out.append(None)
            continue
        rows = inf.parameter_table(res) if res.covariance is not None else [
            (q.label, q.fn(res.mle), math.nan, math.nan, math.nan) for q in pmap.quantities()
        ]
        out.append({row[0]: (row[1], row[2]) for row in rows})
    return out


def run_study(design: StudyDesign, maps, options: inf.FitOptions | None = None,
              workers: int | None = 1) -> StudyResult:
    """Fit every map to every replicate and summarize relative bias and spread.

    ``maps`` holds ``(label, ParameterMap)`` or ``(label, ParameterMap, Aggregation)``.
    Failed or non-converged fits are counted and excluded.
    """
    if not maps:
        raise ValueError("at least one map is needed")
    options = options or inf.FitOptions()
    norm = [(m[0], m[1], m[2] if len(m) > 2 else None) for m in maps]
    inner = inf.FitOptions(**{**options.__dict__, "workers": 1})
    results = ordered_map(
        _study_replicate,
        [(design, norm, inner, r) for r in range(design.replicates)],
        workers,
    )
    rows, failed, estimates = [], {}, {}
    for m, (label, pmap, _) in enumerate(norm):
        ok = [rep[m] for rep in results if rep[m] is not None]
        failed[label] = design.replicates - len(ok)
        for qty in pmap.quantities():
            truth = _truth_value(qty, design.truth)
            est = np.array([r[qty.label][0] for r in ok])
            se = np.array([r[qty.label][1] for r in ok])
            estimates[(label, qty.label)] = est
            if est.size == 0:
                rows.append(StudyRow(label, qty.label, truth, math.nan, math.nan, math.nan, 0))
                continue
            mrb = float(np.mean((est - truth) / truth)) if math.isfinite(truth) and truth else math.nan
            sd = float(np.std(est, ddof=1)) if est.size > 1 else 0.0
            rows.append(StudyRow(label, qty.label, truth, mrb, sd, float(np.mean(se)), est.size))
    return StudyResult(rows, failed, estimates)
