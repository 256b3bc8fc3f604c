"""Command-line entry point: ``polifed <subcommand>``.

Exit status: 0 success, 1 runtime error, 2 bad configuration or flags,
3 training rejected by a policy or privacy budget. Errors are printed to
stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import signal
import statistics
import sys
import threading
from pathlib import Path

from .accountant import PrivacyLedger
from .data import load_dataset
from .edge import EdgeNode, dial_and_serve
from .policy import (
    Cmd,
    CommandInvocation,
    PolicySyntaxError,
    UnknownMacro,
    derive,
    emptiness,
    expand_macros,
    parse_policy,
    reduce,
)
from .scenario import ScenarioConfig, build_world, request_from_body, serve_submission, simulate, submit
from .coordinator import CoordinatorServer
from .runtime import RestrictedProgram
from .wire import MessageKind, model_from_b64

EXIT_ERROR, EXIT_CONFIG, EXIT_REJECTED = 1, 2, 3
REJECTION_CODES = ("BudgetExceeded", "PolicyViolation")


class CliError(Exception):
    def __init__(self, code: int, kind: str, detail: str):
        super().__init__(detail)
        self.code = code
        self.kind = kind
        self.detail = detail


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(EXIT_CONFIG, "ConfigError", f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, "ConfigError", f"{path}: {e}") from None


def _scenario(path: str) -> ScenarioConfig:
    try:
        return ScenarioConfig.from_dict(_load_json(path))
    except (TypeError, ValueError, KeyError) as e:
        raise CliError(EXIT_CONFIG, "ConfigError", f"{path}: {e}") from None


def _hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise CliError(EXIT_CONFIG, "ConfigError", f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _program_fields(path: str | None) -> dict:
    """Programs from a JSON file ``{local_program, global_program?, group_programs?}``."""
    if path is None:
        return {}
    obj = _load_json(path)
    try:
        out = {"local_program": RestrictedProgram.from_json(obj["local_program"]).to_json()}
        if obj.get("global_program"):
            out["global_program"] = RestrictedProgram.from_json(obj["global_program"]).to_json()
        if obj.get("group_programs"):
            out["group_programs"] = {g: RestrictedProgram.from_json(p).to_json() for g, p in obj["group_programs"].items()}
    except (KeyError, ValueError) as e:
        raise CliError(EXIT_CONFIG, "ConfigError", f"{path}: {e}") from None
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_policy_check(args) -> int:
    try:
        p = reduce(parse_policy(args.policy))
        if args.expand:
            p = expand_macros(p)
        trace = []
        for item in filter(None, (s.strip() for s in args.trace.split(","))) if args.trace else ():
            atom = parse_policy(item)
            if not isinstance(atom, Cmd):
                raise PolicySyntaxError(f"trace item {item!r} is not a command", 0)
            trace.append(CommandInvocation(atom.pattern.name, atom.pattern.param_dict()))
    except (PolicySyntaxError, UnknownMacro) as e:
        raise CliError(EXIT_CONFIG, type(e).__name__, str(e)) from None
    steps, cur = [], p
    for inv in trace:
        cur = derive(cur, inv)
        steps.append({"command": str(inv), "residual": cur.text})
    accepted = emptiness(cur)
    _emit({"policy": p.text, "steps": steps, "accepted": accepted, "verdict": "accept" if accepted else "reject"})
    return 0


def cmd_simulate(args) -> int:
    cfg = _scenario(args.scenario)
    request = None
    progs = _program_fields(args.program)
    if progs:
        request = request_from_body(progs, "local-simulation")
    out = args.out or cfg.output_dir
    report = simulate(cfg, out, request=request)
    summary = report.to_json()
    if out:
        summary["run_dir"] = str(out)
    _emit(summary)
    if report.rejection is not None:
        _rejection(report.rejection)
    return 0


def _rejection(rej: dict):
    code = EXIT_REJECTED if rej.get("error") in REJECTION_CODES else EXIT_ERROR
    raise CliError(code, rej.get("error", "Rejected"), rej.get("detail", json.dumps(rej, sort_keys=True)))


def cmd_submit(args) -> int:
    cfg = _scenario(args.scenario)
    token = args.token or os.environ.get("POLIFED_TOKEN", "")
    if not token:
        raise CliError(EXIT_CONFIG, "ConfigError", "no token: pass --token or set POLIFED_TOKEN")
    host, port = _hostport(args.coordinator)
    body = {"token": token, "scenario": cfg.to_dict(), **_program_fields(args.program)}
    try:
        reply = submit(host, port, body, timeout=args.timeout)
    except (ConnectionError, OSError) as e:
        raise CliError(EXIT_ERROR, type(e).__name__, str(e)) from None
    if reply.kind == MessageKind.ERROR:
        raise CliError(EXIT_ERROR, reply.body.get("code", "Error"), reply.body.get("detail", ""))
    body = dict(reply.body)
    if body.get("status") == "final":
        model = model_from_b64(body["model"])
        if args.out:
            Path(args.out).write_bytes(model.to_bytes())
        _emit({"status": "final", "model_sha256": hashlib.sha256(model.to_bytes()).hexdigest(),
               "epsilon": body.get("epsilon"), "failures": body.get("failures")})
        return 0
    _emit({"status": "rejected", "rejection": body.get("rejection"), "epsilon": body.get("epsilon")})
    _rejection(body.get("rejection") or {})
    return EXIT_ERROR


def cmd_serve(args) -> int:
    cfg = _load_json(args.config)
    tokens = cfg.get("tokens")
    if not isinstance(tokens, dict) or not tokens:
        raise CliError(EXIT_CONFIG, "ConfigError", "serve config needs a non-empty 'tokens' object")
    host = args.host or cfg.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(cfg.get("port", 7733))
    wait_s = float(cfg.get("node_wait_s", 60))
    stop = threading.Event()
    server = None

    def handle(body, nodes):
        return serve_submission(body, nodes, tokens, wait_s, server.wait_for_nodes)

    try:
        server = CoordinatorServer(host, port, handle).start()
    except OSError as e:
        raise CliError(EXIT_ERROR, type(e).__name__, str(e)) from None
    sys.stderr.write(json.dumps({"listening": f"{host}:{server.port}"}) + "\n")
    sys.stderr.flush()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        if args.max_submissions:
            server.wait_for_replies(args.max_submissions, stop)
        else:
            stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _nodes_from_config(cfg: dict) -> list[EdgeNode]:
    if "nodes" in cfg:
        out = []
        for n in cfg["nodes"]:
            policy = expand_macros(parse_policy(n["policy"]))
            out.append(EdgeNode(int(n["user_id"]), n["group"], policy, load_dataset(n["dataset"])))
        return out
    scen = cfg.get("scenario")
    if scen is None:
        raise CliError(EXIT_CONFIG, "ConfigError", "node config needs 'nodes' or 'scenario'")
    sc = ScenarioConfig.from_dict(_load_json(scen) if isinstance(scen, str) else scen)
    world = build_world(sc)
    users = cfg.get("users", "all")
    wanted = set(range(sc.n_users)) if users == "all" else {int(u) for u in users}
    return [
        EdgeNode(d.user_id, world.membership[d.user_id], world.policies[world.membership[d.user_id]], d)
        for d in world.datasets
        if d.user_id in wanted
    ]


def cmd_edge(args) -> int:
    cfg = _load_json(args.config)
    try:
        nodes = _nodes_from_config(cfg)
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise CliError(EXIT_CONFIG, "ConfigError", f"{args.config}: {e}") from None
    host, port = _hostport(args.coordinator)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    threads = [
        threading.Thread(target=dial_and_serve, args=(n, host, port, stop, 0.2, args.max_retries), daemon=True)
        for n in nodes
    ]
    for t in threads:
        t.start()
    try:
        for t in threads:
            while t.is_alive():
                t.join(0.5)
    except KeyboardInterrupt:
        stop.set()
    return 0


def _median(xs):
    return statistics.median(xs) if xs else None


def cmd_report(args) -> int:
    run = Path(args.run)
    if not (run / "report.json").exists():
        raise CliError(EXIT_CONFIG, "ConfigError", f"{run} is not a run directory (no report.json)")
    report = json.loads((run / "report.json").read_text())
    cfg = json.loads((run / "config.json").read_text())
    ledger_path = run / "ledger.jsonl"
    ledger = PrivacyLedger.from_jsonl(ledger_path.read_text().splitlines(), target_delta=cfg.get("delta", 1e-8))
    for g in cfg.get("groups", ()):
        ledger.register(g["name"])
    with (run / "timings.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    with (run / "metrics.csv").open(newline="") as fh:
        metrics = list(csv.DictReader(fh))
    cols = ("ttd_ms", "tte_ms", "ttr_ms", "ttp_ms")
    model = run / "final.model"
    summary = {
        "verdict": report["verdict"],
        "rejection": report.get("rejection"),
        "metric": report["metric"],
        "final_metric": report.get("final_metric"),
        "rounds_completed": len(metrics),
        "epsilon": ledger.report(),
        "timing_median_ms": {c: _median([float(r[c]) for r in rows]) for c in cols},
        "participant_rounds": len(rows),
        "final_model_sha256": hashlib.sha256(model.read_bytes()).hexdigest() if model.exists() else None,
    }
    if args.format == "json":
        _emit(summary)
        return 0
    buf = io.StringIO()
    fields = ["round", "phase", "completed", "metric"] + [k for k in (metrics[0] if metrics else {}) if k.startswith("eps_")]
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in metrics:
        w.writerow(r)
    sys.stdout.write(buf.getvalue())
    return 0


class _JsonErrorParser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(json.dumps({"error": "UsageError", "detail": f"{self.prog}: {message}"}) + "\n")
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    ap = _JsonErrorParser(prog="polifed", description="Policy-enforced federated learning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the coordinator service")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--host")
    p.add_argument("--max-submissions", type=int, default=0, help="exit after this many submissions (0 = never)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("edge", help="host edge node(s) that dial the coordinator")
    p.add_argument("--config", required=True)
    p.add_argument("--coordinator", required=True, metavar="HOST:PORT")
    p.add_argument("--max-retries", type=int, default=50, help="give up after this many failed connects")
    p.set_defaults(func=cmd_edge)

    p = sub.add_parser("submit", help="submit a scenario to a running coordinator")
    p.add_argument("--scenario", required=True)
    p.add_argument("--token")
    p.add_argument("--coordinator", default="127.0.0.1:7733", metavar="HOST:PORT")
    p.add_argument("--program", help="JSON file with local_program / global_program / group_programs")
    p.add_argument("--out", help="write the final model here")
    p.add_argument("--timeout", type=float)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("simulate", help="run a scenario in-process")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", help="run directory (default: scenario output_dir)")
    p.add_argument("--program", help="JSON file with local_program / global_program / group_programs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("policy", help="offline policy tools")
    psub = p.add_subparsers(dest="policy_command", required=True)
    c = psub.add_parser("check", help="advance a policy over a trace")
    c.add_argument("--policy", required=True)
    c.add_argument("--trace", default="")
    c.add_argument("--expand", action="store_true", help="expand macros such as runFL first")
    c.set_defaults(func=cmd_policy_check)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as e:
        sys.stderr.write(json.dumps({"error": e.kind, "detail": e.detail}) + "\n")
        return e.code
    except Exception as e:  # last-resort: keep the machine-readable contract
        sys.stderr.write(json.dumps({"error": type(e).__name__, "detail": str(e)}) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
