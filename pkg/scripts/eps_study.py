"""Distance of penalized runs to the projected oracle as eps shrinks, with the observed slope in eps.

No rate is asserted; the slope is reported for inspection.

Usage: python scripts/eps_study.py [--config put1d] [--eps 0.2 0.1 0.05 0.025 0.0125]
"""

import argparse
import math

from fracobstacle import experiments as exp
from fracobstacle.config import resolve


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="put1d")
    p.add_argument("--eps", type=float, nargs="+", default=[0.2, 0.1, 0.05, 0.025, 0.0125])
    args = p.parse_args()
    cfg = resolve(args.config)
    sweep = exp.eps_sweep(cfg.problem(), args.eps, cfg.solver.T)
    prev = None
    print("eps, distance, slope, max_beta, monotonicity_violation, nesting")
    for r in sweep.rows:
        slope = math.log(prev.distance / r.distance) / math.log(prev.eps / r.eps) if prev else float("nan")
        print(f"{r.eps:g}, {r.distance:.5g}, {slope:.3f}, {r.max_beta:.5g}, {r.monotonicity_violation:.3g}, {r.nesting:.3g}")
        prev = r


if __name__ == "__main__":
    main()
