"""Find the noise multipliers frozen in the test suite.

Root-finds on the accountant: the multiplier at which a group sampled at
rate q reaches a target epsilon after a number of rounds, plus one multiplier
for which 1000 rounds stay within budget 1 while 2000 rounds exceed it.

    python3 scripts/calibrate_noise.py
"""

import argparse
import json

from scipy.optimize import brentq

from polifed.accountant import PrivacyLedger, enforce_dp_budget


def epsilon(q: float, z: float, rounds: int, delta: float) -> float:
    ledger = PrivacyLedger(target_delta=delta)
    for t in range(rounds):
        ledger.charge_round("g", q, z, t)
    return ledger.epsilon("g")


def solve(q: float, target: float, rounds: int, delta: float, lo=0.3, hi=20.0) -> float:
    return brentq(lambda z: epsilon(q, z, rounds, delta) - target, lo, hi, xtol=1e-15, rtol=1e-15)


def yes_no_multiplier(q: float, budget: float, delta: float) -> float:
    """Midpoint of the multipliers that put 1000 and 2000 rounds exactly at ``budget``."""
    z_short = solve(q, budget, 1000, delta)
    z_long = solve(q, budget, 2000, delta)
    return (z_short + z_long) / 2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=float, default=5000 / 1e8)
    ap.add_argument("--delta", type=float, default=1e-8)
    ap.add_argument("--rounds", type=int, default=1000)
    ap.add_argument("--targets", type=float, nargs="*", default=[0.82, 1.72])
    ap.add_argument("--budget", type=float, default=1.0)
    args = ap.parse_args()

    out = {"q": args.q, "delta": args.delta, "rounds": args.rounds, "multipliers": {}}
    for target in args.targets:
        z = solve(args.q, target, args.rounds, args.delta)
        out["multipliers"][str(target)] = {"z": z, "epsilon": epsilon(args.q, z, args.rounds, args.delta)}
    z = yes_no_multiplier(args.q, args.budget, args.delta)
    short = enforce_dp_budget(_ledger(args.q, z, 1000, args.delta), "g", args.budget)
    long = enforce_dp_budget(_ledger(args.q, z, 2000, args.delta), "g", args.budget)
    out["yes_no"] = {"z": z, "budget": args.budget, "eps_1000": short.spent, "pass_1000": short.passed,
                     "eps_2000": long.spent, "pass_2000": long.passed}
    print(json.dumps(out, indent=2))


def _ledger(q, z, rounds, delta):
    ledger = PrivacyLedger(target_delta=delta)
    for t in range(rounds):
        ledger.charge_round("g", q, z, t)
    return ledger


if __name__ == "__main__":
    main()
