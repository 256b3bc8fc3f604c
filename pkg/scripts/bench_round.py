"""Time federated rounds with many edge nodes.

Reports the median per-participant time to distribute (TTD), execute (TTE)
and receive (TTR), and the coordinator's processing time (TTP) against the
round span. Nodes are in-process by default; ``--tcp`` runs the same
scenario over loopback sockets and checks both give the same model bytes.

    python3 scripts/bench_round.py --nodes 100 --rounds 3
"""

import argparse
import json
import statistics
import time

from polifed.scenario import GroupConfig, ScenarioConfig, final_model, run_over_tcp, simulate

CIFAR = 'get_data(data_type="cifar") . runFL . return'


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=100)
    ap.add_argument("--rounds", type=int, default=3)
    ap.add_argument("--rows", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--tcp", action="store_true", help="also run over loopback TCP and compare FINAL bytes")
    args = ap.parse_args()

    cfg = ScenarioConfig("multiclass-10", args.nodes, (GroupConfig("all", CIFAR, 1.0),), rows_per_user=args.rows,
                         rounds=args.rounds, round_size=args.nodes, model={"kind": "mlp", "hidden": args.hidden},
                         train={"epochs": args.epochs, "local_lr": 0.05, "batch_size": 16})
    t0 = time.perf_counter()
    report = simulate(cfg, evaluate=False)
    wall = time.perf_counter() - t0
    rows = []
    for t in report.outcome.timings:
        parts = t.participants.values()
        rows.append({
            "round": t.round_index,
            "completed": len(t.participants),
            "ttd_ms": statistics.median(p["ttd_ms"] for p in parts),
            "tte_ms": statistics.median(p["tte_ms"] for p in parts),
            "ttr_ms": statistics.median(p["ttr_ms"] for p in parts),
            "ttp_ms": t.ttp_ms,
            "span_ms": t.span_ms,
            "ttp_share": t.ttp_ms / t.span_ms,
        })
    out = {"nodes": args.nodes, "wall_s": wall, "rounds": rows,
           "median_span_ms": statistics.median(r["span_ms"] for r in rows)}
    if args.tcp:
        t0 = time.perf_counter()
        msg = run_over_tcp(cfg)
        out["tcp_wall_s"] = time.perf_counter() - t0
        out["tcp_identical"] = final_model(msg) is not None and final_model(msg).to_bytes() == report.final.to_bytes()
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
