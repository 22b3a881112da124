"""Depth versus breadth at a fixed budget.

A budget of B units can be spent as T rounds of refinement on M parallel
streams for any T * M = B. This walks every split of B in {1, 2, 4, 8, 16}
in the synthetic environment, where the exact oracle gives the solve rate
with no sampling noise, and then spot-checks one row by simulation.

    python3 demos/tradeoff_sweep.py
"""

from __future__ import annotations

from iterrefine.core import Budget, factorizations
from iterrefine.simenv import SimParams, monte_carlo, oracle_solve_rate

BUDGETS = (1, 2, 4, 8, 16)


def sweep(k: int) -> None:
    params = SimParams(k=k)
    print(f"\nk = {k} bindings per prompt")
    print(f"{'B':>3} {'T':>3} {'M':>3}  solve rate")
    for B in BUDGETS:
        rows = [(b, float(oracle_solve_rate(params, b))) for b in factorizations(B)]
        best = max(rate for _, rate in rows)
        for b, rate in rows:
            mark = "  <- best" if rate == best and len(rows) > 1 else ""
            print(f"{B:>3} {b.rounds:>3} {b.streams:>3}  {rate:.4f}{mark}")


def main():
    for k in (3, 5, 7):
        sweep(k)

    # at k = 7 the gap between all-depth and all-breadth is widest
    params = SimParams(k=7)
    deep, wide = Budget.of(16, 1), Budget.of(1, 16)
    print("\nsimulated check, 5000 trials each:")
    for b in (deep, wide):
        mc = monte_carlo(params, b, 5000, seed=0)
        exact = float(oracle_solve_rate(params, b))
        print(f"  T={b.rounds:<2} M={b.streams:<2} simulated {mc.solve_rate:.4f}  exact {exact:.4f}")


if __name__ == "__main__":
    main()
