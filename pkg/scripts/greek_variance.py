"""Delta estimator variance against time to maturity on the toy model.

Compares the naive likelihood-ratio delta (proposal tracking tau, and a
proposal frozen at a fixed horizon) with the controlled delta.
"""

import argparse
import csv
import sys

from semielliptic.models import make_toy_model
from semielliptic.montecarlo import delta_controlled, delta_naive
from semielliptic.payoffs import expression_payoff


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--x", type=float, default=1.0)
    ap.add_argument("--taus", type=float, nargs="+", default=[1e-1, 1e-2, 1e-3, 1e-4, 1e-5])
    ap.add_argument("--fixed-horizon", type=float, default=1e-2)
    args = ap.parse_args()
    m = make_toy_model(1.0, 1.0)
    p = expression_payoff("x0**2", 2)
    x = [args.x, 0.0]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["tau", "estimator", "value", "std_error", "variance"])
    for tau in args.taus:
        runs = {
            "naive": delta_naive(m, p, tau, x, 0, args.paths, args.seed),
            "naive_fixed": delta_naive(m, p, tau, x, 0, args.paths, args.seed, proposal_horizon=args.fixed_horizon),
            "controlled": delta_controlled(m, p, None, tau, x, 0, args.paths, args.seed),
        }
        for name, e in runs.items():
            w.writerow([tau, name, f"{e.value:.8g}", f"{e.std_error:.4g}", f"{e.variance:.6g}"])


if __name__ == "__main__":
    main()
