"""What backtracking and fresh starts buy.

Edits occasionally break something that was already right (probability r
per correct binding). Backtracking lets a stream discard such a regression
and a fresh start abandons a hopeless image. Removing either action from
the critic's menu should never help; this prints the exact solve rates for
each variant at three budget splits.

    python3 demos/action_ablation.py
"""

from __future__ import annotations

from iterrefine.core import ALL_ACTIONS, Action, Budget
from iterrefine.simenv import SimParams, oracle_solve_rate

VARIANTS = {
    "full": ALL_ACTIONS,
    "no backtrack": ALL_ACTIONS - {Action.BACKTRACK},
    "no fresh start": ALL_ACTIONS - {Action.RESTART},
    "neither": frozenset({Action.CONTINUE, Action.STOP}),
}


def main():
    splits = [Budget.of(4, 4), Budget.of(8, 2), Budget.of(16, 1)]
    for r in (0.05, 0.2):
        params = SimParams(k=6, r=r)
        print(f"\nk = 6, regression probability r = {r}")
        print(f"{'variant':<16}" + "".join(f"{f'T={b.rounds} M={b.streams}':>11}" for b in splits))
        for name, allowed in VARIANTS.items():
            rates = [float(oracle_solve_rate(params, b, allowed)) for b in splits]
            print(f"{name:<16}" + "".join(f"{x:>11.4f}" for x in rates))


if __name__ == "__main__":
    main()
