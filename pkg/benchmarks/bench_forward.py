"""Time the compiled and numpy forward kernels on a simulated three-state dataset.

    python3 benchmarks/bench_forward.py --n 500 --t 20 --repeat 20
"""
import argparse
import timeit

from smas import dwell as dw
from smas import kernels
from smas import likelihood as lk
from smas import simulate as sim
from smas import statespace as ss


def truth(T):
    return ss.ModelParams(
        phi=[0.8, 0.9, 0.6],
        psi_star=[[0, 0.6, 0.4], [0.8, 0, 0.2], [0.5, 0.5, 0]],
        p=[0.2, 0.1, 0.5],
        lam=0.2,
        dwell=(dw.ShiftedNegBinomial(4, 0.4), dw.ShiftedPoisson(4), dw.Geometric(0.4)),
        n_occasions=T,
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--t", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    params = truth(args.t)
    plan = ss.build_aggregation(params.dwell)
    data = sim.simulate_dataset(sim.StudyDesign(args.n, args.t, params, seed=args.seed), 0)
    print(f"{args.n} histories, {args.t} occasions, expanded size {plan.total}")

    timings = {}
    for backend in kernels.available():
        value = lk.joint_loglik(data, params, plan, backend=backend)
        runs = timeit.repeat(lambda b=backend: lk.joint_loglik(data, params, plan, backend=b),
                             number=1, repeat=args.repeat)
        timings[backend] = min(runs)
        print(f"{backend:>8}: {1e3 * timings[backend]:8.2f} ms per evaluation  (loglik {value:.10f})")
    if {"cython", "python"} <= set(timings):
        print(f"speed-up: {timings['python'] / timings['cython']:.2f}x")
    else:
        print("compiled backend unavailable; only the numpy kernel was timed")


if __name__ == "__main__":
    main()
