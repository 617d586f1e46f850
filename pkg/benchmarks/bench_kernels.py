"""Compare the compiled and NumPy kernel backends on an election-sized design.

Run from the repository root::

    python3 benchmarks/bench_kernels.py [--rows 33561] [--repeat 20]

The design uses the full preference formula over the election factors.  Rows
are drawn with replacement from the 24,000-cell cross product, as poll rows
would be, so the row count may exceed the number of distinct cells.
"""

import argparse
import timeit

import numpy as np

from mrp import kernels
from mrp.formula import parse_formula
from mrp.model import Model
from mrp.presets import ELECTION_FACTORS, PREFERENCE_FORMULA


def build_problem(n_cells, seed=0):
    rng = np.random.default_rng(seed)
    model = Model(parse_formula(PREFERENCE_FORMULA), ELECTION_FACTORS)
    radices = [s.n_levels for s in ELECTION_FACTORS]
    flat = rng.integers(0, int(np.prod(radices)), size=n_cells)
    keys = np.array(np.unravel_index(np.sort(flat), radices)).T
    covs = {"female": rng.choice([-0.5, 0.5], n_cells), "state_pres_vote": rng.uniform(-0.2, 0.2, n_cells)}
    d = model.design(keys, covs)
    n_beta = model.layout.n_effects
    beta = rng.normal(0.0, 0.3, n_beta)
    base = rng.normal(0.0, 0.5, n_cells)
    trials = rng.integers(1, 40, n_cells)
    successes = rng.binomial(trials, 0.45)
    return d, base, beta, successes, trials


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=33_561)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    d, base, beta, s, n = build_problem(args.rows)
    backends = kernels.available_backends()
    print(f"rows={args.rows} columns={d.flat_idx.shape[1]} effects={beta.size} "
          f"default backend={kernels.BACKEND}")
    ref = None
    times = {}
    for name, impl in backends.items():
        out = kernels.loglik_grad(base, d.flat_idx, d.mult, beta, s, n, impl=impl)
        if ref is None:
            ref = out
        else:
            dl = abs(out[0] - ref[0]) / abs(ref[0])
            dg = float(np.max(np.abs(out[2] - ref[2])))
            print(f"  {name} vs python: rel loglik diff {dl:.1e}, max grad diff {dg:.1e}")
        for kern, call in (
            ("linear_predictor", lambda: kernels.linear_predictor(base, d.flat_idx, d.mult, beta, impl=impl)),
            ("loglik_grad", lambda: kernels.loglik_grad(base, d.flat_idx, d.mult, beta, s, n, impl=impl)),
        ):
            best = min(timeit.repeat(call, number=1, repeat=args.repeat))
            times[name, kern] = best
            print(f"  {name:>7} {kern:<17} {best * 1e3:8.3f} ms")
    if "cython" in backends:
        for kern in ("linear_predictor", "loglik_grad"):
            print(f"  speedup {kern:<17} {times['python', kern] / times['cython', kern]:6.2f}x")


if __name__ == "__main__":
    main()
