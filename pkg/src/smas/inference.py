"""Parameter maps, maximum likelihood fitting and derived quantities.

A :class:`ParameterMap` turns a free real vector into :class:`ModelParams`.
Probabilities use logit links (multinomial logits for exit destinations and
initial state probabilities), positive dwell parameters use log links.
Structures follow the usual capture-recapture shorthand: ``const``, ``t``,
``c``, ``t+c`` (additive on the logit scale) and ``fixed``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import dwell as dw
from . import likelihood as lk
from . import statespace as ss
from ._parallel import ordered_map

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-8
PENALTY = 1e10
Z95 = 1.959963984540054
STRUCTURES = ("const", "t", "c", "t+c", "fixed")


class MapError(ValueError):
    pass


class FitError(RuntimeError):
    pass


class BoundaryWarning(UserWarning):
    pass


class RankWarning(UserWarning):
    pass


def logit(p):
    return special.logit(p)


def expit(x):
    return special.expit(x)


def _clamped(values, name):
    arr = np.asarray(values, dtype=float)
    clipped = np.clip(arr, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if np.any(clipped != arr):
        warnings.warn(f"{name}: boundary probabilities clamped to [{PROB_CLAMP}, 1-{PROB_CLAMP}]",
                      BoundaryWarning, stacklevel=3)
    return clipped


def _mlogit_pack(probs, name):
    """Multinomial logits relative to the first category."""
    probs = _clamped(probs, name)
    return np.log(probs[1:]) - np.log(probs[0])


def _mlogit_unpack(eta):
    z = np.concatenate(([0.0], np.asarray(eta, dtype=float)))
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class Quantity:
    """A reported natural-scale quantity with the link used for its interval."""

    label: str
    fn: object
    link: str = "logit"

    def link_value(self, value):
        if self.link == "log":
            return math.log(value)
        return float(logit(value))

    def inverse(self, eta):
        if self.link == "log":
            return math.exp(eta)
        return float(expit(eta))


# -- terms ----------------------------------------------------------------------------

class ProbTerm:
    """Probability family on a (time, state) grid.

    ``kind`` selects how the grid maps to the natural arrays: ``"interval"``
    (phi: rows are intervals), ``"occasion"`` (p, alpha: rows are occasions
    2..T, occasion 1 copies occasion 2), ``"scalar"`` (lambda: occasions,
    no state axis).
    """

    def __init__(self, name, structure, n_time, n_states, kind, fixed=None, start=None):
        if structure not in STRUCTURES:
            raise MapError(f"{name}: unknown structure {structure!r}")
        if kind == "scalar" and structure in ("c", "t+c"):
            raise MapError(f"{name}: state-dependent structures are not available")
        if structure == "fixed" and fixed is None:
            raise MapError(f"{name}: fixed structure needs a value")
        self.name = name
        self.structure = structure
        self.nt = n_time
        self.nk = 1 if kind == "scalar" else n_states
        self.kind = kind
        self.fixed = None if fixed is None else self._grid_from_natural(fixed)
        self.start = None if start is None else self._grid_from_natural(start)

    @property
    def n_free(self):
        return {"const": 1, "t": self.nt, "c": self.nk,
                "t+c": self.nt + self.nk - 1, "fixed": 0}[self.structure]

    def _grid_from_natural(self, value):
        arr = np.asarray(value, dtype=float)
        if self.kind == "interval":
            shape = (self.nt, self.nk)
            return np.array(np.broadcast_to(arr, shape), dtype=float)
        T = self.nt + 1
        if self.kind == "scalar":
            arr = np.broadcast_to(arr, (T,)) if arr.ndim <= 1 and arr.size in (1, T) else arr
            full = np.array(np.broadcast_to(arr, (T,)), dtype=float)[:, None]
        else:
            if arr.ndim == 1 and arr.size == self.nk:
                arr = arr[None, :]
            full = np.array(np.broadcast_to(arr, (T, self.nk)), dtype=float)
        return full[1:]

    def natural(self, grid):
        if self.kind == "interval":
            return grid
        full = np.vstack((grid[:1], grid))
        return full[:, 0] if self.kind == "scalar" else full

    def to_grid(self, theta):
        s = self.structure
        if s == "fixed":
            return self.fixed
        if s == "const":
            eta = np.full((self.nt, self.nk), theta[0])
        elif s == "t":
            eta = np.repeat(np.asarray(theta)[:, None], self.nk, axis=1)
        elif s == "c":
            eta = np.repeat(np.asarray(theta)[None, :], self.nt, axis=0)
        else:
            beta = np.asarray(theta[: self.nt])
            gamma = np.concatenate(([0.0], theta[self.nt:]))
            eta = beta[:, None] + gamma[None, :]
        return expit(eta)

    def from_grid(self, grid):
        s = self.structure
        if s == "fixed":
            return np.zeros(0)
        eta = logit(_clamped(grid, self.name))
        if s == "const":
            return eta[:1, 0].copy()
        if s == "t":
            return eta[:, 0].copy()
        if s == "c":
            return eta[0].copy()
        return np.concatenate((eta[:, 0], eta[0, 1:] - eta[0, 0]))

    def link_labels(self):
        s, n = self.structure, self.name
        if s == "const":
            return [f"logit {n}"]
        if s == "t":
            return [f"logit {n}[{self._time_label(t)}]" for t in range(self.nt)]
        if s == "c":
            return [f"logit {n}({k + 1})" for k in range(self.nk)]
        if s == "t+c":
            return ([f"logit {n}[{self._time_label(t)}]" for t in range(self.nt)]
                    + [f"{n} state effect ({k + 1})" for k in range(1, self.nk)])
        return []

    def _time_label(self, t):
        return t + 1 if self.kind == "interval" else t + 2

    def quantities(self, attr):
        """Distinct natural-scale values implied by the structure."""
        s, n = self.structure, self.name
        if s == "fixed":
            grid = self.fixed
            varies_t = not np.all(grid == grid[:1])
            varies_k = not np.all(grid == grid[:, :1])
            s = {(False, False): "const", (True, False): "t",
                 (False, True): "c", (True, True): "t+c"}[(varies_t, varies_k)]
        cells = []
        if s == "const":
            cells = [(n, 0, 0)]
        elif s == "t":
            cells = [(f"{n}[{self._time_label(t)}]", t, 0) for t in range(self.nt)]
        elif s == "c":
            cells = [(f"{n}({k + 1})", 0, k) for k in range(self.nk)]
        else:
            cells = [(f"{n}[{self._time_label(t)}]({k + 1})", t, k)
                     for t in range(self.nt) for k in range(self.nk)]
        offset = 0 if self.kind == "interval" else 1
        out = []
        for label, t, k in cells:
            if self.kind == "scalar":
                fn = (lambda P, t=t: float(getattr(P, attr)[t + offset]))
            else:
                fn = (lambda P, t=t, k=k: float(getattr(P, attr)[t + offset, k]))
            out.append(Quantity(label, fn, "logit"))
        return out


class PsiTerm:
    """Exit-destination probabilities; each row is a multinomial logit over k != j."""

    def __init__(self, structure, n_states, fixed=None, start=None):
        if structure not in ("const", "fixed"):
            raise MapError("psi: only 'const' and 'fixed' structures are supported")
        self.K = n_states
        self.structure = structure if n_states > 2 else "fixed"
        if n_states <= 2:
            fixed = np.ones((1, 1)) if n_states == 1 else np.array([[0.0, 1.0], [1.0, 0.0]])
        elif structure == "fixed" and fixed is None:
            raise MapError("psi: fixed structure needs a value")
        self.fixed = None if fixed is None else self._check(fixed)
        self.start = None if start is None else self._check(start)

    def _check(self, value):
        arr = np.asarray(value, dtype=float)
        if arr.shape != (self.K, self.K):
            raise MapError(f"psi must be a {self.K}x{self.K} matrix")
        if self.K > 1:
            arr = arr.copy()
            np.fill_diagonal(arr, 0.0)
            if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
                raise MapError("psi rows over k != j must sum to 1")
            arr = arr / arr.sum(axis=1, keepdims=True)
            np.fill_diagonal(arr, 0.0)
        return arr

    @property
    def n_free(self):
        return 0 if self.structure == "fixed" else self.K * (self.K - 2)

    def dests(self, j):
        return [k for k in range(self.K) if k != j]

    def to_matrix(self, theta):
        if self.structure == "fixed":
            return self.fixed
        K = self.K
        out = np.zeros((K, K))
        m = K - 2
        for j in range(K):
            out[j, self.dests(j)] = _mlogit_unpack(theta[j * m:(j + 1) * m])
        return out

    def from_matrix(self, mat):
        if self.structure == "fixed":
            return np.zeros(0)
        return np.concatenate([
            _mlogit_pack(np.asarray(mat)[j, self.dests(j)], "psi") for j in range(self.K)
        ])

    def link_labels(self):
        if self.structure == "fixed":
            return []
        out = []
        for j in range(self.K):
            d = self.dests(j)
            out += [f"mlogit psi*({j + 1},{k + 1}) vs ({j + 1},{d[0] + 1})" for k in d[1:]]
        return out

    def quantities(self):
        if self.K <= 2:
            return []
        return [
            Quantity(f"psi*({j + 1},{k + 1})",
                     (lambda P, j=j, k=k: float(P.psi_star[0, j, k])), "logit")
            for j in range(self.K) for k in self.dests(j)
        ]


class DwellTerm:
    """Dwell distribution of one state; any subset of its parameters may be fixed."""

    def __init__(self, k, spec: dw.DwellSpec, fixed_names=(), start_given=True):
        self.k = k
        self.family = spec.family
        self.template = spec
        names = dw.PARAM_NAMES[self.family]
        fixed_names = set(fixed_names)
        unknown = fixed_names - set(names)
        if unknown:
            raise MapError(f"dwell({k + 1}): cannot fix unknown parameters {sorted(unknown)}")
        self.free = [n for n in names if n not in fixed_names]
        self.start_given = start_given
        if self.family == "table" and "probs" in self.free:
            self._table_scale = 1.0 - spec.tail_mass
        if self.family == "table" and "probs" in self.free and len(spec.probs) < 2:
            self.free = []

    @property
    def n_free(self):
        n = 0
        for name in self.free:
            n += len(self.template.probs) - 1 if name == "probs" else 1
        return n

    def build(self, theta, template=None):
        template = template or self.template
        vals = {}
        i = 0
        for name in dw.PARAM_NAMES[self.family]:
            if name not in self.free:
                vals[name] = getattr(template, name)
                continue
            if name == "theta":
                vals[name] = float(expit(theta[i]))
                i += 1
            elif name in ("nu", "mu"):
                vals[name] = float(math.exp(theta[i]))
                i += 1
            else:
                m = len(template.probs) - 1
                vals[name] = tuple(self._table_scale * _mlogit_unpack(theta[i:i + m]))
                i += m
        if self.family == "table":
            return dw.TabulatedPMF(vals["probs"], template.tail_rate)
        return type(template)(**vals)

    def pack(self, spec):
        out = []
        for name in self.free:
            v = getattr(spec, name)
            if name == "theta":
                out.append(float(logit(_clamped(v, f"theta({self.k + 1})"))))
            elif name in ("nu", "mu"):
                out.append(math.log(v))
            else:
                out.extend(_mlogit_pack(np.asarray(v) / sum(v), f"d({self.k + 1})"))
        return np.asarray(out, dtype=float)

    def link_labels(self):
        out = []
        for name in self.free:
            if name == "theta":
                out.append(f"logit theta({self.k + 1})")
            elif name in ("nu", "mu"):
                out.append(f"log {name}({self.k + 1})")
            else:
                out += [f"mlogit d({self.k + 1})[{r}]" for r in range(2, len(self.template.probs) + 1)]
        return out

    def quantities(self):
        out = []
        k, fam = self.k, self.family
        for name in dw.PARAM_NAMES[fam]:
            if name == "probs":
                for r in range(len(self.template.probs)):
                    out.append(Quantity(f"d({k + 1})[{r + 1}]",
                                        (lambda P, r=r: _dwell_attr(P, k, fam, "probs")[r]),
                                        "logit"))
                continue
            out.append(Quantity(f"{name}({k + 1})",
                                (lambda P, name=name: float(_dwell_attr(P, k, fam, name))),
                                "logit" if name == "theta" else "log"))
        return out


def _dwell_attr(P, k, family, name):
    spec = P.dwell[k]
    if spec.family != family:
        raise MapError(f"state {k + 1} has dwell family {spec.family}, not {family}")
    return getattr(spec, name)


class InitTerm:
    def __init__(self, n_states, structure="free", fixed=None, start=None):
        if structure not in ("free", "fixed"):
            raise MapError("init: structure must be 'free' or 'fixed'")
        self.K = n_states
        self.structure = structure if n_states > 1 else "fixed"
        if n_states == 1:
            fixed = np.ones(1)
        if self.structure == "fixed" and fixed is None:
            raise MapError("init: fixed structure needs a value")
        self.fixed = None if fixed is None else np.asarray(fixed, dtype=float)
        self.start = None if start is None else np.asarray(start, dtype=float)

    @property
    def n_free(self):
        return 0 if self.structure == "fixed" else self.K - 1

    def to_vector(self, theta):
        return self.fixed if self.structure == "fixed" else _mlogit_unpack(theta)

    def from_vector(self, vec):
        return np.zeros(0) if self.structure == "fixed" else _mlogit_pack(vec, "init")

    def link_labels(self):
        if self.structure == "fixed":
            return []
        return [f"mlogit pi({k + 1}) vs pi(1)" for k in range(1, self.K)]

    def quantities(self):
        return [Quantity(f"pi({k + 1})", (lambda P, k=k: float(P.init_extra[k])), "logit")
                for k in range(self.K)]


# -- parameter map ---------------------------------------------------------------------

class ParameterMap:
    """Structured map between a free vector and :class:`ModelParams`."""

    def __init__(self, n_states, n_occasions, phi, p, lam, psi, alpha, dwell,
                 init_mode="stationary", init=None, renormalize=True, label=None):
        self.n_states = int(n_states)
        self.n_occasions = int(n_occasions)
        if self.n_occasions < 2:
            raise MapError("need at least two occasions")
        self.phi, self.p, self.lam, self.psi, self.alpha = phi, p, lam, psi, alpha
        self.dwell = list(dwell)
        if len(self.dwell) != self.n_states:
            raise MapError("one dwell term per state expected")
        if init_mode not in ss.INIT_MODES:
            raise MapError(f"init_mode must be one of {ss.INIT_MODES}")
        self.init_mode = init_mode
        self.init = init if init_mode == "estimated" else None
        if init_mode == "estimated" and init is None:
            raise MapError("estimated init mode needs an init term")
        self.renormalize = renormalize
        self.label = label
        self._layout = []
        i = 0
        for name, term in self._terms():
            self._layout.append((name, term, slice(i, i + term.n_free)))
            i += term.n_free
        self.n_free = i

    @classmethod
    def build(cls, n_states, n_occasions, structure=None, values=None, starts=None,
              dwell=None, init_mode="stationary", renormalize=True, label=None):
        """Convenience constructor from structure strings and natural-scale values.

        ``structure`` maps family -> structure string (``phi``, ``p``,
        ``lambda``, ``psi``, ``alpha``, ``init``); ``values`` holds values for
        fixed families; ``starts`` optional starting values for free ones;
        ``dwell`` is a list of (spec, fixed_names) pairs or dwell specs.
        """
        structure = dict(structure or {})
        values = dict(values or {})
        starts = dict(starts or {})
        K, T = int(n_states), int(n_occasions)
        default = {"phi": "c", "p": "c", "lambda": "const", "psi": "const",
                   "alpha": "fixed", "init": "free"}
        unknown = set(structure) - set(default)
        if unknown:
            raise MapError(f"unknown parameter families {sorted(unknown)}")
        st = {**default, **structure}
        if st["alpha"] == "fixed":
            values.setdefault("alpha", 1.0)
        if K > 2 and st["psi"] == "fixed" and "psi" not in values:
            raise MapError("psi: fixed structure needs a value")

        def term_args(name):
            fixed = values.get(name) if st[name] == "fixed" else None
            start = starts.get(name, values.get(name)) if st[name] != "fixed" else None
            return fixed, start

        phi = ProbTerm("phi", st["phi"], T - 1, K, "interval", *term_args("phi"))
        p = ProbTerm("p", st["p"], T - 1, K, "occasion", *term_args("p"))
        lam = ProbTerm("lambda", st["lambda"], T - 1, K, "scalar", *term_args("lambda"))
        alpha = ProbTerm("alpha", st["alpha"], T - 1, K, "occasion", *term_args("alpha"))
        psi = PsiTerm(st["psi"], K, *term_args("psi"))
        terms = []
        for k, item in enumerate(dwell or []):
            if isinstance(item, dw.DwellSpec):
                spec, fixed_names, given = item, (), True
            else:
                spec, fixed_names = item[0], item[1]
                given = item[2] if len(item) > 2 else True
            terms.append(DwellTerm(k, spec, fixed_names, given))
        init = None
        if init_mode == "estimated":
            init = InitTerm(K, st["init"], *term_args("init"))
        return cls(K, T, phi, p, lam, psi, alpha, terms, init_mode, init, renormalize, label)

    def _terms(self):
        yield "phi", self.phi
        yield "p", self.p
        yield "lambda", self.lam
        yield "psi", self.psi
        yield "alpha", self.alpha
        for t in self.dwell:
            yield f"dwell({t.k + 1})", t
        if self.init is not None:
            yield "init", self.init

    def link_labels(self):
        out = []
        for _, term, _ in self._layout:
            out += term.link_labels()
        return out

    def unpack(self, theta) -> ss.ModelParams:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise MapError(f"expected {self.n_free} free parameters, got {theta.shape}")
        parts = {name: theta[sl] for name, _, sl in self._layout}
        T = self.n_occasions
        psi = self.psi.to_matrix(parts["psi"])
        return ss.ModelParams(
            phi=self.phi.natural(self.phi.to_grid(parts["phi"])),
            psi_star=np.broadcast_to(psi, (T - 1,) + psi.shape),
            p=self.p.natural(self.p.to_grid(parts["p"])),
            lam=self.lam.natural(self.lam.to_grid(parts["lambda"])),
            alpha=self.alpha.natural(self.alpha.to_grid(parts["alpha"])),
            dwell=tuple(t.build(parts[f"dwell({t.k + 1})"]) for t in self.dwell),
            init_mode=self.init_mode,
            init_extra=None if self.init is None else self.init.to_vector(parts["init"]),
            renormalize=self.renormalize,
            n_occasions=T,
        )

    def pack(self, params: ss.ModelParams) -> np.ndarray:
        """Free vector reproducing ``params`` as closely as the structure allows."""
        pieces = []
        for name, term, _ in self._layout:
            if name == "phi":
                pieces.append(term.from_grid(term._grid_from_natural(params.phi)))
            elif name == "p":
                pieces.append(term.from_grid(term._grid_from_natural(params.p)))
            elif name == "lambda":
                pieces.append(term.from_grid(term._grid_from_natural(params.lam)))
            elif name == "alpha":
                pieces.append(term.from_grid(term._grid_from_natural(params.alpha)))
            elif name == "psi":
                pieces.append(term.from_matrix(params.psi_star[0]))
            elif name == "init":
                pieces.append(term.from_vector(params.init_extra))
            else:
                pieces.append(term.pack(params.dwell[term.k]))
        return np.concatenate(pieces) if pieces else np.zeros(0)

    def quantities(self):
        out = self.phi.quantities("phi") + self.psi.quantities()
        out += self.p.quantities("p") + self.lam.quantities("lam")
        out += self.alpha.quantities("alpha")
        for t in self.dwell:
            out += t.quantities()
        if self.init is not None:
            out += self.init.quantities()
        return out

    def dwell_labels(self, params):
        return [spec.label() for spec in params.dwell]

    # -- starting values --------------------------------------------------------------
    def start_vector(self, dataset: lk.Dataset) -> np.ndarray:
        """Free vector from configured starts, filling gaps with data-driven guesses."""
        guess = moment_guess(dataset)
        K, T = self.n_states, self.n_occasions
        pieces = []
        for name, term, _ in self._layout:
            if term.n_free == 0:
                pieces.append(np.zeros(0))
                continue
            if name in ("phi", "p", "lambda", "alpha"):
                start = term.start
                if start is None:
                    key = {"lambda": "lam"}.get(name, name)
                    start = term._grid_from_natural(guess[key])
                pieces.append(term.from_grid(start))
            elif name == "psi":
                mat = term.start if term.start is not None else guess["psi"]
                pieces.append(term.from_matrix(mat))
            elif name == "init":
                vec = term.start if term.start is not None else guess["init"]
                pieces.append(term.from_vector(vec))
            else:
                spec = term.template
                if not term.start_given:
                    spec = _guess_dwell(spec, guess["leave"][term.k])
                pieces.append(term.pack(spec))
        return np.concatenate(pieces) if pieces else np.zeros(0)


def _guess_dwell(template, leave_rate):
    q = float(np.clip(leave_rate, 0.02, 0.98))
    fam = template.family
    if fam == "geom":
        return dw.Geometric(q)
    if fam == "snb":
        return dw.ShiftedNegBinomial(1.0, q)
    if fam == "poisson":
        return dw.ShiftedPoisson(max(0.1, 1.0 / q - 1.0))
    return template


def moment_guess(dataset: lk.Dataset) -> dict:
    """Crude natural-scale starting values from raw frequencies."""
    obs = dataset.obs
    K = dataset.n_states
    first = dataset.first
    N, T = obs.shape
    after = np.arange(T)[None, :] > first[:, None]
    live = (obs > 0) | (obs == ss.UNKNOWN)
    last_live = T - 1 - np.argmax(live[:, ::-1], axis=1)
    window = after & (np.arange(T)[None, :] <= last_live[:, None])
    resight = (live & window).sum() / max(1, window.sum())
    p0 = float(np.clip(resight, 0.05, 0.95))
    sightings = live.sum()
    known = (obs > 0).sum()
    alpha0 = float(np.clip(known / max(1, sightings), 0.05, 0.999))
    rec = (obs == ss.DEAD).sum()
    lam0 = float(np.clip(rec / max(1.0, 0.3 * N), 0.02, 0.9))
    counts = np.full((K, K), 0.5)
    a, b = obs[:, :-1], obs[:, 1:]
    both = (a > 0) & (b > 0)
    np.add.at(counts, (a[both] - 1, b[both] - 1), 1.0)
    leave = np.ones(K) * 0.5
    psi = np.zeros((K, K))
    for j in range(K):
        off = counts[j].sum() - counts[j, j]
        leave[j] = off / counts[j].sum() if K > 1 else 0.5
        if K > 1:
            row = counts[j].copy()
            row[j] = 0.0
            psi[j] = row / row.sum()
    firsts = obs[np.arange(N), first]
    init = np.array([(firsts == k + 1).sum() + 0.5 for k in range(K)])
    return {
        "phi": 0.75, "p": p0, "lam": lam0, "alpha": alpha0,
        "psi": psi if K > 1 else np.ones((1, 1)), "leave": leave,
        "init": init / init.sum(),
    }


# -- fitting --------------------------------------------------------------------------

@dataclass
class FitOptions:
    n_starts: int = 10
    tol: float = 1e-6
    max_iter: int = 2000
    seed: int = 0
    method: str = "auto"
    jitter: float = 1.0
    hessian: bool = True
    workers: int | None = 1


@dataclass(frozen=True)
class Aggregation:
    """How aggregate sizes are chosen when fitting."""

    epsilon: float = dw.DEFAULT_EPSILON
    sizes: tuple | None = None
    max_size: int = dw.DEFAULT_MAX_SIZE

    def plan_for(self, dwell_specs) -> ss.AggregationPlan:
        return ss.build_aggregation(dwell_specs, self.epsilon, self.sizes, self.max_size)


@dataclass
class FitResult:
    mle: ss.ModelParams
    free_vector: np.ndarray
    loglik: float
    aic: float
    n_params: int
    covariance: np.ndarray | None
    converged: bool
    n_evals: int
    multistart_spread: float
    plan: ss.AggregationPlan
    pmap: ParameterMap = field(repr=False)
    start_logliks: list = field(default_factory=list)
    message: str = ""
    grad_max: float = 0.0
    history: list = field(default_factory=list, repr=False)

    @property
    def labels(self):
        return self.pmap.link_labels()


class _Objective:
    """Negative joint log-likelihood on the free vector; impossible points get a penalty."""

    def __init__(self, dataset, pmap, plan, backend=None):
        self.pmap = pmap
        self.plan = plan
        self.backend = backend
        uniq, inverse, counts = lk._compress(dataset.obs)
        self.uniq = uniq
        self.counts = counts.astype(float)
        self.first = np.argmax(uniq != ss.UNSEEN, axis=1)
        self.sizes = np.asarray(plan.sizes, dtype=np.int64)
        self.n_evals = 0

    def loglik(self, theta):
        params = self.pmap.unpack(theta)
        stay, leave = lk.kernel_inputs(params, self.plan)
        init = lk.initial_vectors(self.uniq, self.first, params, self.plan)
        ll = lk.kernels.forward_loglik(
            self.uniq, self.first, init, self.sizes, stay, leave, params.phi,
            params.psi_star, params.p, params.alpha, params.lam, backend=self.backend,
        )
        return float(np.dot(self.counts, ll)) if np.all(np.isfinite(ll)) else -math.inf

    def __call__(self, theta):
        self.n_evals += 1
        if not np.all(np.isfinite(theta)):
            return PENALTY
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ll = self.loglik(theta)
        except (ValueError, ss.StationaryError, FloatingPointError, OverflowError):
            return PENALTY
        if not math.isfinite(ll):
            return PENALTY
        return -ll


def _steps(x, rel):
    return rel * np.maximum(1.0, np.abs(x))


def numerical_gradient(f, x, rel=1e-5):
    """Central-difference gradient."""
    x = np.asarray(x, dtype=float)
    h = _steps(x, rel)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2 * h[i])
    return g


def richardson_gradient(f, x, rel=1e-3):
    """Central differences at ``h`` and ``h/2`` combined by Richardson extrapolation."""
    x = np.asarray(x, dtype=float)
    h = _steps(x, rel)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        d1 = (f(x + e) - f(x - e)) / (2 * h[i])
        d2 = (f(x + e / 2) - f(x - e / 2)) / h[i]
        g[i] = (4 * d2 - d1) / 3
    return g


def numerical_hessian(f, x, rel=1e-5):
    """Central-difference Hessian with steps ``rel * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = _steps(x, rel)
    f0 = f(x)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def invert_information(H):
    """Covariance from the observed information; pseudo-inverse with a warning if singular."""
    H = 0.5 * (H + H.T)
    if H.size == 0:
        return H.copy()
    eig = np.linalg.eigvalsh(H)
    if eig.min() > 1e-10 * max(1.0, eig.max()):
        cov = np.linalg.inv(H)
    else:
        rank = int(np.sum(eig > 1e-10 * max(1.0, eig.max())))
        warnings.warn(f"observed information is not positive definite (rank {rank} of {len(eig)}); "
                      "using the pseudo-inverse", RankWarning, stacklevel=2)
        cov = np.linalg.pinv(H, hermitian=True)
    return 0.5 * (cov + cov.T)


def _choose_method(n, method):
    if method != "auto":
        return method
    return "nelder-mead" if n <= 8 else "bfgs"


def _optimize(obj, x0, options: FitOptions):
    method = _choose_method(x0.size, options.method)
    trace = []
    f0 = obj(x0)
    if f0 >= PENALTY:
        return None
    if method == "nelder-mead":
        x = x0
        res = None
        for _ in range(2):  # restart once from the collapsed simplex
            simplex = np.vstack([x] + [x + 0.5 * e for e in np.eye(x.size)])
            res = optimize.minimize(
                obj, x, method="Nelder-Mead",
                options={"initial_simplex": simplex, "xatol": 1e-7, "fatol": 1e-9,
                         "maxfev": options.max_iter * (x.size + 1) * 10,
                         "maxiter": options.max_iter * 10, "adaptive": x.size > 4},
            )
            trace.append(float(res.fun))
            x = res.x
        success = bool(res.success)
    elif method == "bfgs":
        def cb(xk):
            trace.append(float(obj(xk)))
        res = optimize.minimize(
            obj, x0, jac=lambda x: numerical_gradient(obj, x), method="BFGS", callback=cb,
            options={"gtol": options.tol * 100, "maxiter": options.max_iter},
        )
        success = bool(res.success)
    else:
        raise FitError(f"unknown optimizer {method!r}")
    grad = numerical_gradient(obj, res.x)
    gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
    converged = success or gmax <= 1e-2
    return {"x": res.x, "fun": float(res.fun), "converged": converged, "message": str(res.message),
            "grad_max": gmax, "trace": [f0] + trace}


def _run_start(args):
    dataset, pmap, plan, x0, options = args
    obj = _Objective(dataset, pmap, plan)
    out = _optimize(obj, np.asarray(x0, dtype=float), options)
    if out is not None:
        out["n_evals"] = obj.n_evals
    return out


def fit(dataset: lk.Dataset, pmap: ParameterMap, options: FitOptions | None = None,
        aggregation: Aggregation | None = None) -> FitResult:
    """Maximize the joint log-likelihood from several jittered starts."""
    options = options or FitOptions()
    aggregation = aggregation or Aggregation()
    if dataset.n_states != pmap.n_states or dataset.n_occasions != pmap.n_occasions:
        raise FitError("parameter map does not match the dataset dimensions")
    x0 = pmap.start_vector(dataset)
    n = pmap.n_free
    plan = aggregation.plan_for(pmap.unpack(x0).dwell)
    if n == 0:
        params = pmap.unpack(x0)
        ll = lk.joint_loglik(dataset, params, plan)
        return FitResult(params, x0, ll, -2 * ll, 0, np.zeros((0, 0)), math.isfinite(ll), 1, 0.0,
                         plan, pmap, [ll], "no free parameters")
    rng = np.random.default_rng(options.seed)
    starts = [x0] + [x0 + options.jitter * rng.standard_normal(n)
                     for _ in range(max(0, options.n_starts - 1))]
    results = ordered_map(_run_start, [(dataset, pmap, plan, s, options) for s in starts],
                          options.workers)
    ok = [r for r in results if r is not None]
    if not ok:
        raise FitError(f"all {len(starts)} starts failed (non-finite likelihood at every start)")
    n_evals = sum(r["n_evals"] for r in ok)
    best = min(ok, key=lambda r: (r["fun"], -r["converged"]))
    start_ll = [(-r["fun"] if r is not None else -math.inf) for r in results]
    finite = [-r["fun"] for r in ok if r["fun"] < PENALTY]
    spread = max(finite) - min(finite) if finite else math.inf

    # grow aggregates if the optimum needs longer ones than the starting plan
    for _ in range(3):
        needed = aggregation.plan_for(pmap.unpack(best["x"]).dwell)
        if all(a >= b for a, b in zip(plan.sizes, needed.sizes)):
            break
        plan = ss.AggregationPlan(tuple(max(a, b) for a, b in zip(plan.sizes, needed.sizes)))
        log.info("refitting with larger aggregates %s", plan.sizes)
        again = _run_start((dataset, pmap, plan, best["x"], options))
        if again is not None:
            n_evals += again["n_evals"]
            best = again

    theta = best["x"]
    mle = pmap.unpack(theta)
    ll = lk.joint_loglik(dataset, mle, plan)
    cov = None
    if options.hessian:
        obj = _Objective(dataset, pmap, plan)
        cov = invert_information(numerical_hessian(obj, theta))
        n_evals += obj.n_evals
    return FitResult(
        mle=mle, free_vector=theta, loglik=ll, aic=-2 * ll + 2 * n, n_params=n,
        covariance=cov, converged=best["converged"], n_evals=n_evals,
        multistart_spread=spread, plan=plan, pmap=pmap, start_logliks=start_ll,
        message=best["message"], grad_max=best["grad_max"], history=best["trace"],
    )


def observed_information(fit_result: FitResult, dataset: lk.Dataset,
                         pmap: ParameterMap | None = None) -> np.ndarray:
    """Inverse of the finite-difference Hessian of the negative log-likelihood at the MLE."""
    pmap = pmap or fit_result.pmap
    obj = _Objective(dataset, pmap, fit_result.plan)
    return invert_information(numerical_hessian(obj, fit_result.free_vector))


# -- derived quantities -----------------------------------------------------------------

def _require_cov(fit_result):
    if fit_result.covariance is None:
        raise FitError("fit has no covariance; refit with hessian=True")
    return fit_result.covariance


def delta_interval(fit_result: FitResult, fn, link="logit", rel=1e-6):
    """Estimate, natural-scale SE and Wald 95% interval built on the link scale."""
    cov = _require_cov(fit_result)
    theta = fit_result.free_vector
    pmap = fit_result.pmap
    value = fn(pmap.unpack(theta))
    q = Quantity("", None, link)
    if theta.size == 0 or (link == "logit" and value in (0.0, 1.0)):
        return value, 0.0, value, value
    g_nat = numerical_gradient(lambda x: fn(pmap.unpack(x)), theta, rel)
    g_link = numerical_gradient(lambda x: q.link_value(fn(pmap.unpack(x))), theta, rel)
    se = math.sqrt(max(0.0, float(g_nat @ cov @ g_nat)))
    sd_link = math.sqrt(max(0.0, float(g_link @ cov @ g_link)))
    if sd_link == 0.0:
        return value, se, value, value
    eta = q.link_value(value)
    lo, hi = q.inverse(eta - Z95 * sd_link), q.inverse(eta + Z95 * sd_link)
    return value, se, min(lo, value), max(hi, value)


def parameter_table(fit_result: FitResult):
    """Rows ``(label, estimate, se, lower, upper)`` for every reported quantity."""
    rows = []
    for qty in fit_result.pmap.quantities():
        if fit_result.covariance is None:
            v = qty.fn(fit_result.mle)
            rows.append((qty.label, v, math.nan, math.nan, math.nan))
        else:
            rows.append((qty.label,) + delta_interval(fit_result, qty.fn, qty.link))
    return rows


def dwell_pmf_ci(fit_result: FitResult, k: int, r_max: int):
    """Pointwise 95% intervals for ``d_k(r)``, ``r = 1..r_max`` (delta method, logit scale).

    Returns an array with columns ``r, d, lower, upper``.
    """
    _require_cov(fit_result)
    out = np.empty((r_max, 4))
    for r in range(1, r_max + 1):
        d, _, lo, hi = delta_interval(
            fit_result, lambda P, r=r: float(P.dwell[k].pmf(r)), "logit"
        )
        out[r - 1] = (r, d, max(0.0, lo), min(1.0, hi))
    return out


def stationary_summary(fit_result: FitResult) -> np.ndarray:
    """State-level stationary distribution of the fitted restricted chain."""
    return state_stationary(fit_result.mle, fit_result.plan)


def state_stationary(params: ss.ModelParams, plan: ss.AggregationPlan, t: int = 0) -> np.ndarray:
    pi = ss.stationary_restricted(t, params, plan)
    return np.array([pi[plan.aggregate(k)].sum() for k in range(plan.n_states)])


# -- model selection ---------------------------------------------------------------------

@dataclass
class SelectionRow:
    label: str
    dwell: list
    aic: float
    delta: float
    loglik: float
    n_params: int
    converged: bool
    error: str = ""


def model_select(dataset: lk.Dataset, candidates, options: FitOptions | None = None,
                 aggregation: Aggregation | None = None):
    """Fit every candidate and rank by AIC.

    ``candidates`` is a list of ``(label, ParameterMap)`` or
    ``(label, ParameterMap, Aggregation)`` tuples.  Failed fits are kept with
    ``nan`` AIC, flagged, listed last and excluded from the delta baseline.
    """
    rows = []
    fits = []
    for cand in candidates:
        label, pmap = cand[0], cand[1]
        agg = cand[2] if len(cand) > 2 else aggregation
        try:
            res = fit(dataset, pmap, options, agg)
        except FitError as exc:
            rows.append(SelectionRow(label, [t.template.label() for t in pmap.dwell],
                                     math.nan, math.nan, math.nan, pmap.n_free, False, str(exc)))
            fits.append(None)
            continue
        fits.append(res)
        rows.append(SelectionRow(label, pmap.dwell_labels(res.mle), res.aic, math.nan,
                                 res.loglik, res.n_params, res.converged))
    order = rank_rows(rows)
    return [rows[i] for i in order], [fits[i] for i in order]


def rank_rows(rows):
    """Fill in delta AIC and return the row order: ascending AIC, failed fits last."""
    valid = [r.aic for r in rows if math.isfinite(r.aic)]
    best = min(valid) if valid else math.nan
    for r in rows:
        r.delta = r.aic - best if math.isfinite(r.aic) else math.nan
    return sorted(range(len(rows)), key=lambda i: (not math.isfinite(rows[i].aic), rows[i].aic, i))


def format_selection_table(rows) -> str:
    """Aligned text table: one dwell column per state, then AIC and delta AIC."""
    K = max(len(r.dwell) for r in rows)
    header = [f"State {k + 1}" for k in range(K)] + ["AIC", "dAIC"]
    body = []
    for r in rows:
        if math.isfinite(r.aic):
            aic = f"{r.aic:.3f}"
            delta = "0.0" if r.delta == 0 else f"{r.delta:.3f}"
        else:
            aic, delta = "failed", "-"
        body.append(list(r.dwell) + [aic, delta])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(K + 2)]
    lines = []
    for row in [header] + body:
        cells = [c.ljust(w) for c, w in zip(row[:K], widths[:K])]
        cells += [c.rjust(w) for c, w in zip(row[K:], widths[K:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
