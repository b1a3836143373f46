"""Command-line front end: ``smas simulate | fit | select | study | dump``.

Exit codes: 0 success, 2 usage or config error (including malformed data
files), 3 runtime failure, 4 fit finished without converging.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

import numpy as np

from . import inference as inf
from . import io
from . import simulate as sim
from . import statespace as ss

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NOT_CONVERGED = 0, 2, 3, 4

log = logging.getLogger("smas")


class UsageError(Exception):
    pass


def _stem(path):
    root, _ = os.path.splitext(path)
    return root


def _positive(name, value):
    if value is not None and value < 1:
        raise UsageError(f"--{name} must be >= 1")
    return value


def _apply_overrides(cfg: io.ModelConfig, args) -> io.ModelConfig:
    agg = cfg.aggregation
    if getattr(args, "epsilon", None) is not None:
        if not 0 < args.epsilon < 1:
            raise UsageError("--epsilon must lie in (0, 1)")
        agg = inf.Aggregation(args.epsilon, agg.sizes, agg.max_size)
    if getattr(args, "max_agg", None) is not None:
        agg = inf.Aggregation(agg.epsilon, agg.sizes, _positive("max-agg", args.max_agg))
    cfg.aggregation = agg
    opts = dict(cfg.options.__dict__)
    if getattr(args, "starts", None) is not None:
        opts["n_starts"] = _positive("starts", args.starts)
    if getattr(args, "seed", None) is not None:
        opts["seed"] = args.seed
    cfg.options = inf.FitOptions(**opts)
    return cfg


def _load_data(path, cfg):
    return io.parse_histories(path, cfg.n_states, cfg.n_occasions)


# -- simulate -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _apply_overrides(io.load_config(args.config), args)
    _positive("n", args.n)
    T = args.t or cfg.n_occasions
    if T is None or T < 2:
        raise UsageError("--t (>= 2) is required when the config has no n_occasions")
    truth = cfg.truth(T)
    design = sim.StudyDesign(
        args.n, T, truth, replicates=1, seed=args.seed or 0,
        entry_policy=cfg.simulation.get("entry_policy", "all_first"),
        fresh_dwell=cfg.simulation.get("fresh_dwell", True), aggregation=cfg.aggregation,
    )
    data = sim.simulate_dataset(design, args.replicate)
    io.write_histories(args.out, data)
    truth_path = args.truth_out or _stem(args.out) + ".truth.json"
    io.atomic_write(truth_path, io.dumps(io.params_to_dict(truth)))
    log.info("wrote %d histories to %s and truth to %s", len(data), args.out, truth_path)
    return EXIT_OK


# -- fit ------------------------------------------------------------------------------

def _report(res: inf.FitResult, table, stationary, ci_tables) -> str:
    lines = [
        f"log-likelihood  {res.loglik:.6f}",
        f"AIC             {res.aic:.6f}",
        f"free parameters {res.n_params}",
    ]
    if res.n_params == 0:
        return "\n".join(lines) + "\n"
    lines += [
        f"converged       {'yes' if res.converged else 'no'}",
        f"evaluations     {res.n_evals}",
        f"start spread    {res.multistart_spread:.6g}",
        f"aggregates      {' '.join(map(str, res.plan.sizes))}",
        "",
        f"{'parameter':<16}{'estimate':>12}{'SE':>12}{'lower':>12}{'upper':>12}",
    ]
    for name, est, se, lo, hi in table:
        lines.append(f"{name:<16}{est:>12.5f}{se:>12.5f}{lo:>12.5f}{hi:>12.5f}")
    lines += ["", "stationary state distribution  " + " ".join(f"{x:.4f}" for x in stationary)]
    for k, ci in enumerate(ci_tables):
        lines += ["", f"dwell pmf, state {k + 1}", f"{'r':>4}{'d':>10}{'lower':>10}{'upper':>10}"]
        for r, d, lo, hi in ci:
            lines.append(f"{int(r):>4}{d:>10.5f}{lo:>10.5f}{hi:>10.5f}")
    return "\n".join(lines) + "\n"


def _ci_csv(ci_tables) -> str:
    rows = ["state,r,d,lo,hi"]
    for k, ci in enumerate(ci_tables):
        for r, d, lo, hi in ci:
            rows.append(f"{k + 1},{int(r)},{d:.10g},{lo:.10g},{hi:.10g}")
    return "\n".join(rows) + "\n"


def cmd_fit(args) -> int:
    cfg = _apply_overrides(io.load_config(args.config), args)
    data = _load_data(args.data, cfg)
    pmap = cfg.parameter_map(data.n_occasions)
    res = inf.fit(data, pmap, cfg.options, cfg.aggregation)
    table, stationary, cis = [], [], []
    if res.n_params:
        table = inf.parameter_table(res)
        stationary = inf.stationary_summary(res)
        cis = [inf.dwell_pmf_ci(res, k, args.dwell_rmax) for k in range(cfg.n_states)]
    report = _report(res, table, stationary, cis)
    result = io.fit_to_dict(res, table)
    result["stationary"] = list(map(float, stationary))
    io.atomic_write(args.out, io.dumps(result))
    io.atomic_write(_stem(args.out) + ".report.txt", report)
    if cis:
        io.atomic_write(_stem(args.out) + ".dwell_ci.csv", _ci_csv(cis))
    if not args.quiet:
        sys.stdout.write(report)
    if not res.converged:
        log.warning("optimizer did not converge; results written with converged=false")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# -- select ---------------------------------------------------------------------------

def _selection_csv(rows) -> str:
    K = max(len(r.dwell) for r in rows)
    out = [",".join([f"state{k + 1}" for k in range(K)]
                    + ["label", "loglik", "n_params", "aic", "delta_aic", "converged", "error"])]
    for r in rows:
        out.append(",".join(list(r.dwell) + [
            r.label or "", f"{r.loglik:.6f}", str(r.n_params), f"{r.aic:.6f}", f"{r.delta:.6f}",
            str(r.converged).lower(), r.error.replace(",", ";"),
        ]))
    return "\n".join(out) + "\n"


def cmd_select(args) -> int:
    cfgs = [_apply_overrides(io.load_config(p), args) for p in args.config]
    K = {c.n_states for c in cfgs}
    if len(K) != 1:
        raise UsageError("all candidate configs must share n_states")
    data = _load_data(args.data, cfgs[0])
    candidates = []
    for path, cfg in zip(args.config, cfgs):
        label = cfg.label or os.path.splitext(os.path.basename(path))[0]
        candidates.append((label, cfg.parameter_map(data.n_occasions), cfg.aggregation))
    rows, _ = inf.model_select(data, candidates, cfgs[0].options)
    text = inf.format_selection_table(rows)
    io.atomic_write(args.out, text)
    io.atomic_write(_stem(args.out) + ".csv", _selection_csv(rows))
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


# -- study ----------------------------------------------------------------------------

def cmd_study(args) -> int:
    cfg = _apply_overrides(io.load_config(args.config), args)
    _positive("n", args.n)
    _positive("replicates", args.replicates)
    T = args.t or cfg.n_occasions
    if T is None or T < 2:
        raise UsageError("--t (>= 2) is required when the config has no n_occasions")
    truth = cfg.truth(T)
    design = sim.StudyDesign(
        args.n, T, truth, replicates=args.replicates, seed=args.seed or 0,
        entry_policy=cfg.simulation.get("entry_policy", "all_first"),
        fresh_dwell=cfg.simulation.get("fresh_dwell", True), aggregation=cfg.aggregation,
    )
    maps = []
    for path in args.fit_config or [args.config]:
        fc = _apply_overrides(io.load_config(path), args)
        if fc.n_states != cfg.n_states:
            raise UsageError(f"{path}: n_states differs from the truth config")
        label = fc.label or os.path.splitext(os.path.basename(path))[0]
        maps.append((label, fc.parameter_map(T), fc.aggregation))
    result = sim.run_study(design, maps, cfg.options, workers=args.workers)
    io.atomic_write(args.out, result.to_csv())
    io.atomic_write(_stem(args.out) + ".txt", result.to_text())
    if not args.quiet:
        sys.stdout.write(result.to_text())
    if all(n == args.replicates for n in result.n_failed.values()):
        log.error("every replicate fit failed")
        return EXIT_RUNTIME
    return EXIT_OK


# -- dump -----------------------------------------------------------------------------

def cmd_dump(args) -> int:
    cfg = _apply_overrides(io.load_config(args.config), args)
    T = args.t or cfg.n_occasions or 2
    truth = cfg.truth(T)
    plan = cfg.aggregation.plan_for(truth.dwell)
    os.makedirs(args.out, exist_ok=True)
    gamma = ss.build_tpm(args.occasion, ss.UNSEEN, ss.UNSEEN, truth, plan)
    io.atomic_write(os.path.join(args.out, "transition.csv"), _matrix_csv(gamma))
    hz = ss.position_hazards(truth, plan)
    io.atomic_write(os.path.join(args.out, "hazards.csv"),
                    "position,state,hazard\n" + "".join(
                        f"{i + 1},{int(s) + 1},{h:.12g}\n"
                        for i, (s, h) in enumerate(zip(plan.state_of_position(), hz))))
    pi = ss.stationary_restricted(args.occasion, truth, plan)
    io.atomic_write(os.path.join(args.out, "stationary.csv"),
                    "position,probability\n" + "".join(f"{i + 1},{x:.12g}\n" for i, x in enumerate(pi)))
    log.info("aggregate sizes %s, expanded size %d", plan.sizes, plan.total)
    return EXIT_OK


def _matrix_csv(m) -> str:
    return "\n".join(",".join(f"{x:.12g}" for x in row) for row in np.asarray(m)) + "\n"


# -- entry point ----------------------------------------------------------------------

def _common(p, fit_opts=True):
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-agg", dest="max_agg", type=int)
    p.add_argument("--quiet", action="store_true")
    if fit_opts:
        p.add_argument("--starts", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a history file from a truth config")
    _common(p, fit_opts=False)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=int)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--truth-out", dest="truth_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model to a history file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--dwell-rmax", dest="dwell_rmax", type=int, default=15)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="rank several models by AIC")
    p.add_argument("--config", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-agg", dest="max_agg", type=int)
    p.add_argument("--starts", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("study", help="replicate simulation study with bias summaries")
    _common(p)
    p.add_argument("--fit-config", dest="fit_config", nargs="+")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=int)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("dump", help="write model matrices as CSV")
    _common(p, fit_opts=False)
    p.add_argument("--t", type=int)
    p.add_argument("--occasion", type=int, default=0)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.quiet:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except (sim.SimulationError, inf.FitError, ss.StationaryError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except (UsageError, io.ConfigError, io.ParseError, inf.MapError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
