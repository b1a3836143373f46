import numpy as np
import pytest

from smas import dwell as dw
from smas import statespace as ss


def three_state_truth(T=20, **changes):
    values = dict(
        phi=[0.8, 0.9, 0.6],
        psi_star=[[0, 0.6, 0.4], [0.8, 0, 0.2], [0.5, 0.5, 0]],
        p=[0.2, 0.1, 0.5],
        lam=0.2,
        dwell=(dw.ShiftedNegBinomial(4, 0.4), dw.ShiftedPoisson(4), dw.Geometric(0.4)),
        n_occasions=T,
    )
    values.update(changes)
    return ss.ModelParams(**values)


def random_dwell(rng, allow_table=True):
    kind = rng.integers(0, 4 if allow_table else 3)
    if kind == 0:
        return dw.Geometric(float(rng.uniform(0.1, 0.9)))
    if kind == 1:
        return dw.ShiftedPoisson(float(rng.uniform(0.3, 4)))
    if kind == 2:
        return dw.ShiftedNegBinomial(float(rng.uniform(0.5, 5)), float(rng.uniform(0.2, 0.8)))
    R = int(rng.integers(1, 4))
    probs = rng.dirichlet(np.ones(R + 1))
    if rng.random() < 0.5:
        return dw.TabulatedPMF(tuple(probs[:-1] / probs[:-1].sum()))
    return dw.TabulatedPMF(tuple(probs[:-1]))


def random_params(rng, K, T, unknown=True, init_mode="stationary"):
    psi = np.zeros((T - 1, K, K))
    for t in range(T - 1):
        for j in range(K):
            if K == 1:
                psi[t, j, j] = 1.0
            else:
                row = rng.dirichlet(np.ones(K - 1))
                psi[t, j, [k for k in range(K) if k != j]] = row
    init_extra = rng.dirichlet(np.ones(K)) if init_mode == "estimated" else None
    return ss.ModelParams(
        phi=rng.uniform(0.3, 0.95, (T - 1, K)),
        psi_star=psi if K > 1 else np.ones((T - 1, 1, 1)),
        p=rng.uniform(0.2, 0.9, (T, K)),
        lam=rng.uniform(0.05, 0.6, T),
        alpha=rng.uniform(0.5, 1.0, (T, K)) if unknown else 1.0,
        dwell=tuple(random_dwell(rng) for _ in range(K)),
        init_mode=init_mode,
        init_extra=init_extra,
        n_occasions=T,
    )


def random_history(rng, K, T, t0=None):
    """Random valid history, possibly with unknown-state sightings and a recovery."""
    t0 = int(rng.integers(0, T - 1)) if t0 is None else t0
    x = [0] * T
    x[t0] = int(rng.integers(1, K + 1)) if rng.random() < 0.8 else ss.UNKNOWN
    dead_at = int(rng.integers(t0 + 1, T + 2))
    for t in range(t0 + 1, T):
        if t == dead_at:
            x[t] = ss.DEAD if rng.random() < 0.6 else 0
            break
        u = rng.random()
        if u < 0.4:
            x[t] = int(rng.integers(1, K + 1))
        elif u < 0.55:
            x[t] = ss.UNKNOWN
    return tuple(x)


@pytest.fixture
def truth3():
    return three_state_truth()


_ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    _ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
