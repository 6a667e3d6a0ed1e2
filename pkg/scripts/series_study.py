"""Term norms and fitted contraction ratio of the alternating series as rho shrinks.

Writes CSV rows (model, rho, term, norm, ratio) to stdout.
"""

import argparse
import csv
import sys

import numpy as np

from semielliptic.models import BlockSDE, make_toy_model
from semielliptic.payoffs import expression_payoff
from semielliptic.scheme import DilatationParams, GridSpec, run_series


def shear():
    def drift(x, t=0.0):
        out = np.zeros_like(x)
        out[..., 1] = 1.0 + 0.5 * x[..., 0]
        return out

    def vol(x, t=0.0):
        out = np.zeros(x.shape + (1,))
        out[..., 0, 0] = 1.0
        return out
    return BlockSDE(2, 1, 1, drift, vol, name="shear")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T0", type=float, default=0.5)
    ap.add_argument("--L-max", type=int, default=5)
    ap.add_argument("--rhos", type=float, nargs="+", default=[1.0, 0.5, 0.25, 0.125])
    args = ap.parse_args()
    cases = [(make_toy_model(1.0, 1.0), "cos(x0) * cos(x1)"), (shear(), "cos(x0) * x1")]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["model", "rho", "term", "norm", "ratio"])
    for model, expr in cases:
        p = expression_payoff(expr, model.n, growth_C=1.0)
        grid = GridSpec.around(model, np.zeros(model.n), args.T0)
        for rho in args.rhos:
            sol = run_series(model, p, DilatationParams(rho, args.T0), grid, L_max=args.L_max, tol=0.0,
                             fail_ratio=False)
            for i, v in enumerate(sol.term_norms, start=1):
                w.writerow([model.name, rho, i, f"{v:.6e}", f"{sol.ratio:.6e}"])


if __name__ == "__main__":
    main()
