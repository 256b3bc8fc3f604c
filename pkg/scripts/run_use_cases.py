"""Run each example scenario under every training strategy and tabulate
final metric, verdict and spent epsilon per group.

    python3 scripts/run_use_cases.py [--scenarios scripts/scenarios/*.json] [--out runs/]
"""

import argparse
import dataclasses
import glob
import json
from pathlib import Path

from polifed.scenario import ScenarioConfig, simulate

STRATEGIES = ("cascaded", "combined", "subset-only")
HERE = Path(__file__).resolve().parent


def run(path: Path, strategy: str, out: Path | None) -> dict:
    cfg = dataclasses.replace(ScenarioConfig.load(path), strategy=strategy)
    run_dir = out / f"{path.stem}-{strategy}" if out else None
    report = simulate(cfg, run_dir)
    return {
        "scenario": path.stem,
        "strategy": strategy,
        "verdict": report.verdict,
        "metric": report.metric_name,
        "final": report.metrics[-1].get("metric") if report.metrics else None,
        "epsilon": {r["group"]: r["epsilon"] for r in report.epsilon},
        "rejection": report.rejection and report.rejection.get("error"),
    }


def _fmt(x):
    if x is None:
        return "no-DP"
    return f"{x:.3f}" if isinstance(x, float) else str(x)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", nargs="*", default=sorted(glob.glob(str(HERE / "scenarios" / "*.json"))))
    ap.add_argument("--strategies", nargs="*", default=list(STRATEGIES))
    ap.add_argument("--out", type=Path, help="write one run directory per (scenario, strategy)")
    ap.add_argument("--json", action="store_true", help="print raw rows as JSON lines")
    args = ap.parse_args()

    # a group charged for rounds without noise has no finite epsilon ("no-DP")
    rows = [run(Path(p), s, args.out) for p in args.scenarios for s in args.strategies]
    if args.json:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
        return
    print(f"{'scenario':<12} {'strategy':<12} {'verdict':<9} {'metric':<9} {'final':>7}  epsilon")
    for r in rows:
        eps = ", ".join(f"{g}={_fmt(e)}" for g, e in sorted(r["epsilon"].items()))
        note = f"  ({r['rejection']})" if r["rejection"] else ""
        print(f"{r['scenario']:<12} {r['strategy']:<12} {r['verdict']:<9} {r['metric']:<9} {_fmt(r['final']):>7}  {eps}{note}")


if __name__ == "__main__":
    main()
