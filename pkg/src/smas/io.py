"""File formats: encounter-history text files, JSON model configs and JSON fit results.

History files hold one individual per line: an optional id token ending in
``:`` followed by ``T`` whitespace-separated symbols from ``0``, ``1..K``,
``u`` (seen, state not recorded) and ``D`` (recovered dead).  Blank lines and
lines starting with ``#`` are skipped.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import dwell as dw
from . import inference as inf
from . import likelihood as lk
from . import statespace as ss

UNKNOWN_TOKENS = ("u", "-1")
DEAD_TOKENS = ("D",)

CONFIG_KEYS = {
    "n_states", "n_occasions", "label", "dwell", "structure", "values", "init_mode",
    "renormalize", "aggregation", "optimizer", "simulation",
}
AGGREGATION_KEYS = {"epsilon", "sizes", "max_size"}
OPTIMIZER_KEYS = {"n_starts", "tol", "max_iter", "seed", "method", "jitter", "hessian", "workers"}
SIMULATION_KEYS = {"entry_policy", "fresh_dwell"}
VALUE_KEYS = {"phi", "p", "lambda", "psi", "alpha", "init"}
_DWELL_DEFAULTS = {"theta": 0.5, "nu": 1.0, "mu": 1.0}


class ParseError(ValueError):
    """Malformed history file; ``line`` is 1-based."""

    def __init__(self, message, line=None, path=None):
        where = f"{path or '<input>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class ConfigError(ValueError):
    pass


# -- atomic writes --------------------------------------------------------------------

def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file in the same directory and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- histories ------------------------------------------------------------------------

def parse_token(tok: str, n_states: int) -> int:
    if tok in UNKNOWN_TOKENS:
        return ss.UNKNOWN
    if tok in DEAD_TOKENS:
        return ss.DEAD
    if not tok.isdigit():
        raise ValueError(f"unrecognized symbol {tok!r}")
    value = int(tok)
    if value > n_states:
        raise ValueError(f"state {value} exceeds K={n_states}")
    return value


def format_token(code: int) -> str:
    if code == ss.UNKNOWN:
        return "u"
    if code == ss.DEAD:
        return "D"
    return str(code)


def parse_history_lines(lines, n_states: int, n_occasions: int | None = None,
                        path=None) -> lk.Dataset:
    histories = []
    T = n_occasions
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        ident = None
        if tokens[0].endswith(":"):
            ident = tokens[0][:-1]
            tokens = tokens[1:]
        if T is None:
            T = len(tokens)
        if len(tokens) != T:
            raise ParseError(f"expected {T} symbols, found {len(tokens)}", lineno, path)
        try:
            codes = [parse_token(t, n_states) for t in tokens]
        except ValueError as exc:
            raise ParseError(str(exc), lineno, path) from None
        if ss.DEAD in codes:
            at = codes.index(ss.DEAD)
            later = [t for t in codes[at + 1:] if t != ss.UNSEEN]
            if later:
                raise ParseError("only 0 may follow a recovery (D)", lineno, path)
        try:
            histories.append(lk.EncounterHistory(tuple(codes), ident or str(lineno)))
        except lk.HistoryError as exc:
            raise ParseError(str(exc), lineno, path) from None
    if not histories:
        raise ParseError("no histories found", None, path)
    return lk.Dataset(tuple(histories), T, n_states)


def parse_histories(path, n_states: int, n_occasions: int | None = None) -> lk.Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_history_lines(fh, n_states, n_occasions, path=os.fspath(path))


def format_histories(dataset: lk.Dataset, with_ids: bool = True) -> str:
    out = []
    for h in dataset.histories:
        body = " ".join(format_token(x) for x in h.symbols)
        out.append(f"{h.id}: {body}" if with_ids and h.id is not None else body)
    return "\n".join(out) + "\n"


def write_histories(path, dataset: lk.Dataset, with_ids: bool = True) -> None:
    atomic_write(path, format_histories(dataset, with_ids))


# -- configs --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    n_states: int
    n_occasions: int | None
    label: str | None
    dwell: list
    structure: dict
    values: dict
    init_mode: str
    renormalize: bool
    aggregation: inf.Aggregation
    options: inf.FitOptions
    simulation: dict

    def parameter_map(self, n_occasions: int | None = None) -> inf.ParameterMap:
        T = n_occasions or self.n_occasions
        if T is None:
            raise ConfigError("number of occasions is unknown (set n_occasions or pass data)")
        try:
            return inf.ParameterMap.build(
                self.n_states, T, self.structure, self.values, dwell=self.dwell,
                init_mode=self.init_mode, renormalize=self.renormalize, label=self.label,
            )
        except (inf.MapError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def truth(self, n_occasions: int | None = None) -> ss.ModelParams:
        """Natural-scale parameters for simulation; every family needs a value."""
        T = n_occasions or self.n_occasions
        if T is None:
            raise ConfigError("number of occasions is unknown")
        v = self.values
        missing = {"phi", "p", "lambda"} - set(v)
        if self.n_states > 2:
            missing |= {"psi"} - set(v)
        if self.init_mode == "estimated":
            missing |= {"init"} - set(v)
        if missing:
            raise ConfigError(f"simulation needs values for {sorted(missing)}")
        K = self.n_states
        if K == 2 and "psi" not in v:
            psi = np.array([[0.0, 1.0], [1.0, 0.0]])
        else:
            psi = np.asarray(v.get("psi", np.ones((1, 1))), dtype=float)
        for spec, _, given in self.dwell:
            if not given:
                raise ConfigError("simulation needs every dwell parameter")
        try:
            return ss.ModelParams(
                phi=_time_values(v["phi"], T - 1, K), psi_star=psi,
                p=_time_values(v["p"], T, K), lam=_time_values(v["lambda"], T, None),
                alpha=_time_values(v.get("alpha", 1.0), T, K),
                dwell=tuple(spec for spec, _, _ in self.dwell), init_mode=self.init_mode,
                init_extra=v.get("init"), renormalize=self.renormalize, n_occasions=T,
            )
        except (ss.StateSpaceError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _time_values(value, n_time, n_states):
    arr = np.asarray(value, dtype=float)
    if n_states is None:
        return arr
    if arr.ndim == 1 and arr.size == n_states:
        return np.broadcast_to(arr, (n_time, n_states))
    return arr


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def _dwell_entry(item, k):
    if not isinstance(item, dict):
        raise ConfigError(f"dwell[{k}] must be an object")
    data = dict(item)
    fixed = data.pop("fixed", [])
    if isinstance(fixed, str):
        fixed = [fixed]
    if fixed is True:
        fixed = None
    fam = str(data.get("family", "")).lower()
    cls = dw.FAMILIES.get(fam)
    if cls is None:
        raise ConfigError(f"dwell[{k}]: unknown family {data.get('family')!r}")
    names = dw.PARAM_NAMES[cls.family]
    if fixed is None:
        fixed = list(names)
    given = all(n in data for n in names)
    for n in names:
        if n not in data:
            if n in fixed:
                raise ConfigError(f"dwell[{k}]: fixed parameter {n} needs a value")
            if n not in _DWELL_DEFAULTS:
                raise ConfigError(f"dwell[{k}]: parameter {n} needs a value")
            data[n] = _DWELL_DEFAULTS[n]
    try:
        spec = dw.from_dict(data)
    except (dw.DwellValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"dwell[{k}]: {exc}") from None
    return spec, tuple(fixed), given


def config_from_dict(data: dict) -> ModelConfig:
    _check_keys("config", data, CONFIG_KEYS)
    try:
        K = int(data["n_states"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("n_states (integer) is required") from None
    if K < 1:
        raise ConfigError("n_states must be >= 1")
    dwell_items = data.get("dwell")
    if not isinstance(dwell_items, list) or len(dwell_items) != K:
        raise ConfigError(f"dwell must list {K} specs")
    structure = dict(data.get("structure", {}))
    _check_keys("structure", structure, set(VALUE_KEYS))
    values = dict(data.get("values", {}))
    _check_keys("values", values, VALUE_KEYS)
    agg = dict(data.get("aggregation", {}))
    _check_keys("aggregation", agg, AGGREGATION_KEYS)
    opt = dict(data.get("optimizer", {}))
    _check_keys("optimizer", opt, OPTIMIZER_KEYS)
    simulation = dict(data.get("simulation", {}))
    _check_keys("simulation", simulation, SIMULATION_KEYS)
    init_mode = data.get("init_mode", "stationary")
    if init_mode not in ss.INIT_MODES:
        raise ConfigError(f"init_mode must be one of {ss.INIT_MODES}")
    T = data.get("n_occasions")
    if T is not None and (not isinstance(T, int) or T < 2):
        raise ConfigError("n_occasions must be an integer >= 2")
    sizes = agg.get("sizes")
    try:
        aggregation = inf.Aggregation(
            epsilon=float(agg.get("epsilon", dw.DEFAULT_EPSILON)),
            sizes=None if sizes is None else tuple(int(a) for a in sizes),
            max_size=int(agg.get("max_size", dw.DEFAULT_MAX_SIZE)),
        )
        options = inf.FitOptions(**opt)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if sizes is not None and len(sizes) != K:
        raise ConfigError(f"aggregation sizes must list {K} values")
    return ModelConfig(
        n_states=K, n_occasions=T, label=data.get("label"),
        dwell=[_dwell_entry(item, k) for k, item in enumerate(dwell_items)],
        structure=structure, values=values, init_mode=init_mode,
        renormalize=bool(data.get("renormalize", True)), aggregation=aggregation,
        options=options, simulation=simulation,
    )


def load_config(path) -> ModelConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


# -- results --------------------------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def params_to_dict(params: ss.ModelParams) -> dict:
    out = {
        "n_occasions": params.n_occasions,
        "phi": params.phi.tolist(),
        "psi": params.psi_star[0].tolist(),
        "p": params.p.tolist(),
        "lambda": params.lam.tolist(),
        "alpha": params.alpha.tolist(),
        "dwell": [spec.to_dict() for spec in params.dwell],
        "init_mode": params.init_mode,
    }
    if params.init_extra is not None:
        out["init"] = np.asarray(params.init_extra).tolist()
    return out


def fit_to_dict(res: inf.FitResult, table=None) -> dict:
    out = {
        "loglik": _clean(res.loglik),
        "aic": _clean(res.aic),
        "n_params": res.n_params,
        "converged": res.converged,
        "n_evals": res.n_evals,
        "multistart_spread": _clean(res.multistart_spread),
        "aggregate_sizes": list(res.plan.sizes),
        "free_labels": res.labels,
        "free_vector": res.free_vector.tolist(),
        "covariance": None if res.covariance is None else res.covariance.tolist(),
        "mle": params_to_dict(res.mle),
    }
    if table is not None:
        out["parameters"] = [
            {"name": r[0], "estimate": _clean(r[1]), "se": _clean(r[2]),
             "lower": _clean(r[3]), "upper": _clean(r[4])}
            for r in table
        ]
    return out


def dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=False) + "\n"
