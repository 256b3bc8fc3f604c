"""Scenario configs, world construction, and end-to-end runs.

A scenario fixes the task, the users and their privacy groups, the training
strategy and all seeds. ``simulate`` runs it with in-process nodes;
``run_over_tcp`` runs the same scenario over loopback sockets.
"""

from __future__ import annotations

import csv
import io
import json
import socket
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .accountant import DEFAULT_DELTA, PrivacyLedger
from .coordinator import (
    Capture,
    Coordinator,
    CoordinatorServer,
    GroupSchedule,
    InProcessNode,
    InvalidToken,
    Phase,
    ScheduleOutcome,
    TrainingRequest,
)
from .data import UserDataset, accuracy, generate_task, roc_auc
from .edge import EdgeNode, dial_and_serve
from .fl import DpConfig, ModelParams, make_task
from .policy import ZERO, CommandInvocation, Policy, command_patterns, derive, expand_macros, parse_policy
from .runtime import RestrictedProgram, Step
from .wire import Message, MessageKind, model_from_b64, model_to_b64, recv_message, send_message

__all__ = [
    "GroupConfig",
    "ScenarioConfig",
    "World",
    "RunReport",
    "feature_columns",
    "assign_groups",
    "build_world",
    "build_schedule",
    "compliant_local_program",
    "default_global_program",
    "build_request",
    "simulate",
    "run_over_tcp",
    "serve_submission",
    "write_run_dir",
]

DATA_COMMANDS = ("get_data", "filter", "in_geofence_cond")
TRAIN_COMMANDS = ("train_local_dp", "train_local")


@dataclass(frozen=True)
class GroupConfig:
    name: str
    policy: str
    fraction: float
    dp: Mapping[str, Any] | None = None
    max_epsilon: float | None = None
    rounds: int | None = None

    def dp_config(self) -> DpConfig | None:
        return DpConfig.from_dict(self.dp) if self.dp else None


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one run. Loaded from JSON."""

    task_kind: str
    n_users: int
    groups: tuple[GroupConfig, ...]
    rows_per_user: int = 50
    strategy: str = "combined"
    rounds: int = 10
    round_size: int = 10
    eta: float = 1.0
    divisor: str = "round"
    model: Mapping[str, Any] = field(default_factory=lambda: {"kind": "auto"})
    train: Mapping[str, Any] = field(default_factory=lambda: {"epochs": 1, "local_lr": 0.1, "batch_size": 32})
    partition: str = "iid"
    alpha: float = 0.9
    separation: float | None = None
    n_features: int = 4
    vocab: int = 8
    seed: int = 0
    data_seed: int = 0
    subset_group: str | None = None
    geofences: Mapping[str, Any] = field(default_factory=dict)
    delta: float = DEFAULT_DELTA
    timeout_s: float | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if not self.groups:
            raise ValueError("at least one group is required")
        total = sum(g.fraction for g in self.groups)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"group fractions sum to {total}, not 1")
        if len({g.name for g in self.groups}) != len(self.groups):
            raise ValueError("group names must be unique")
        if self.divisor not in ("round", "population"):
            raise ValueError("divisor must be 'round' or 'population'")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        d["groups"] = tuple(GroupConfig(**g) for g in d.get("groups", ()))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d

    def group(self, name: str) -> GroupConfig:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)


def feature_columns(cfg: ScenarioConfig) -> tuple[str, ...]:
    """Model input columns; known from the task kind without touching data."""
    if cfg.task_kind == "classification-2class":
        return ("f0", "f1", "f2", "f3", "mic_level", "dist_campus_km")
    if cfg.task_kind == "multiclass-10":
        return tuple(f"f{j}" for j in range(max(cfg.n_features, 4)))
    if cfg.task_kind == "sequence-next-token":
        return tuple(f"prev_{v}" for v in range(cfg.vocab))
    raise ValueError(f"unknown task kind {cfg.task_kind!r}")


def task_spec(cfg: ScenarioConfig) -> dict:
    n_features = len(feature_columns(cfg))
    n_classes = {"classification-2class": 2, "multiclass-10": 10, "sequence-next-token": cfg.vocab}[cfg.task_kind]
    kind = cfg.model.get("kind", "auto")
    if kind == "auto":
        kind = "logistic" if n_classes == 2 else "softmax"
    if kind == "logistic":
        return {"kind": "logistic", "n_features": n_features, "l2": float(cfg.model.get("l2", 0.0))}
    if kind == "softmax":
        return {"kind": "softmax", "n_features": n_features, "n_classes": n_classes}
    if kind == "mlp":
        return {"kind": "mlp", "n_features": n_features, "hidden": int(cfg.model.get("hidden", 16)), "n_classes": n_classes}
    raise ValueError(f"unknown model kind {kind!r}")


def node_config(cfg: ScenarioConfig) -> dict:
    """The ``config`` body sent with every TASK (DP settings added per phase)."""
    return {
        "task": task_spec(cfg),
        "train": {k: cfg.train[k] for k in ("epochs", "local_lr", "batch_size") if k in cfg.train},
        "features": list(feature_columns(cfg)),
        "seed": cfg.seed,
        "geofences": {k: dict(v) for k, v in cfg.geofences.items()},
    }


def assign_groups(cfg: ScenarioConfig) -> dict[int, str]:
    """Deterministic user -> group map following the configured fractions."""
    order = np.random.default_rng([cfg.data_seed, 7]).permutation(cfg.n_users)
    cuts = np.round(np.cumsum([g.fraction for g in cfg.groups]) * cfg.n_users).astype(int)
    out, start = {}, 0
    for g, stop in zip(cfg.groups, cuts):
        for uid in order[start:stop]:
            out[int(uid)] = g.name
        start = stop
    return out


def group_policies(cfg: ScenarioConfig) -> dict[str, Policy]:
    """Parsed and macro-expanded once, at load time."""
    return {g.name: expand_macros(parse_policy(g.policy)) for g in cfg.groups}


@dataclass
class World:
    cfg: ScenarioConfig
    datasets: list[UserDataset]
    membership: dict[int, str]
    policies: dict[str, Policy]

    def members(self, group: str) -> list[int]:
        return sorted(u for u, g in self.membership.items() if g == group)


def build_world(cfg: ScenarioConfig) -> World:
    datasets = generate_task(
        cfg.task_kind,
        cfg.n_users,
        cfg.rows_per_user,
        cfg.data_seed,
        partition=cfg.partition,
        alpha=cfg.alpha,
        separation=cfg.separation,
        n_features=cfg.n_features,
        vocab=cfg.vocab,
    )
    return World(cfg, datasets, assign_groups(cfg), group_policies(cfg))


def _dropped_sensors(policy: Policy) -> int:
    n = 0
    for pat in command_patterns(policy):
        if pat.name == "filter":
            for _, v in pat.params:
                n += len(v) if isinstance(v, tuple) else 1
    return n


def restrictiveness(g: GroupConfig, policy: Policy):
    """Sort key: smaller budget first, then more dropped sensors first."""
    budget = g.max_epsilon if g.max_epsilon is not None else float("inf")
    return (budget, -_dropped_sensors(policy), g.name)


def build_schedule(cfg: ScenarioConfig, membership: Mapping[int, str] | None = None) -> GroupSchedule:
    membership = dict(membership or assign_groups(cfg))
    policies = group_policies(cfg)
    members = {g.name: tuple(sorted(u for u, gg in membership.items() if gg == g.name)) for g in cfg.groups}
    ordered = sorted(cfg.groups, key=lambda g: restrictiveness(g, policies[g.name]))
    if cfg.strategy == "combined":
        # one phase over everyone under the most restrictive group's DP settings
        strict = ordered[0]
        everyone = tuple(sorted(membership))
        m = min(cfg.round_size, len(everyone))
        dp = strict.dp_config()
        if dp is not None:
            dp = DpConfig(dp.clip_bound, dp.noise_sigma, m, dp.placement, dp.noise_multiplier)
        phases = (Phase("combined", tuple(g.name for g in cfg.groups), everyone, cfg.rounds, m, dp),)
    elif cfg.strategy == "subset-only":
        g = cfg.group(cfg.subset_group) if cfg.subset_group else ordered[-1]
        m = min(cfg.round_size, len(members[g.name]))
        phases = (Phase(g.name, (g.name,), members[g.name], g.rounds or cfg.rounds, m, _dp_for(g, m)),)
    elif cfg.strategy == "cascaded":
        per = max(1, cfg.rounds // len(ordered))
        phases = tuple(
            Phase(g.name, (g.name,), members[g.name], g.rounds or per, min(cfg.round_size, len(members[g.name])),
                  _dp_for(g, min(cfg.round_size, len(members[g.name]))))
            for g in ordered
            if members[g.name]
        )
    else:
        raise ValueError(f"unknown strategy {cfg.strategy!r}")
    return GroupSchedule(cfg.strategy, phases, membership, policies)


def _dp_for(g: GroupConfig, m: int) -> DpConfig | None:
    dp = g.dp_config()
    if dp is None:
        return None
    return DpConfig(dp.clip_bound, dp.noise_sigma, m, dp.placement, dp.noise_multiplier)


def _first_allowed(p: Policy, names) -> tuple[CommandInvocation, Policy] | None:
    """First invocation of one of ``names`` (in that preference order) the policy allows."""
    pats = command_patterns(p)
    for name in names:
        candidates = [pat for pat in pats if pat.name == name] or []
        for pat in candidates:
            inv = CommandInvocation(name, pat.param_dict())
            nxt = derive(p, inv)
            if nxt != ZERO:
                return inv, nxt
    return None


def compliant_local_program(policy: Policy, use_dp: bool = False) -> RestrictedProgram:
    """Straight-line local program that follows ``policy`` up to training.

    Data-side commands are taken in the order the policy asks for them,
    with the arguments it names; the training step prefers the DP variant
    when ``use_dp`` is set.
    """
    steps, slot, p = [], "user", policy
    for i in range(32):
        train = _first_allowed(p, TRAIN_COMMANDS if use_dp else TRAIN_COMMANDS[::-1])
        if train is not None and slot != "user":
            inv, _ = train
            steps.append(Step(inv.name, {}, ("model", slot), "update"))
            return RestrictedProgram("local", tuple(steps))
        step = _first_allowed(p, DATA_COMMANDS)
        if step is None:
            raise ValueError(f"policy {policy.text!r} never reaches a training command")
        inv, p = step
        out = f"d{i}"
        steps.append(Step(inv.name, dict(inv.args), (slot,), out))
        slot = out
    raise ValueError("policy prefix too long")


def default_global_program(eta: float | None = None) -> RestrictedProgram:
    args = {} if eta is None else {"eta": eta}
    return RestrictedProgram("global", (Step("average", args, ("model", "sum"), "next"),))


def build_request(cfg: ScenarioConfig, token: str) -> TrainingRequest:
    policies = group_policies(cfg)
    progs = {g.name: compliant_local_program(policies[g.name], g.dp is not None) for g in cfg.groups}
    default = progs[cfg.groups[0].name]
    return TrainingRequest(token, default_global_program(), default, progs)


def request_from_body(body: Mapping, token: str) -> TrainingRequest | None:
    """Programs carried in a SUBMIT body, or None to use compliant defaults."""
    if "local_program" not in body:
        return None
    return TrainingRequest(
        token,
        RestrictedProgram.from_json(body.get("global_program") or default_global_program().to_json()),
        RestrictedProgram.from_json(body["local_program"]),
        {g: RestrictedProgram.from_json(p) for g, p in (body.get("group_programs") or {}).items()},
    )


def _evaluator(world: World):
    cfg = world.cfg
    task = make_task(task_spec(cfg))
    cols = feature_columns(cfg)
    X = np.concatenate([d.features(cols) for d in world.datasets])
    y = np.concatenate([d.labels() for d in world.datasets])
    if cfg.task_kind == "classification-2class":
        return lambda m: roc_auc(y, task.predict_proba(m, X))
    return lambda m: accuracy(y, task.predict(m, X))


def _make_coordinator(cfg: ScenarioConfig, nodes, token: str) -> Coordinator:
    return Coordinator(nodes, {token: "scenario"}, timeout_s=cfg.timeout_s)


def _run(coord: Coordinator, cfg: ScenarioConfig, request: TrainingRequest, evaluate=None) -> ScheduleOutcome:
    schedule = build_schedule(cfg)
    task = make_task(task_spec(cfg))
    return coord.run_schedule(
        request,
        schedule,
        task.init_params(cfg.seed),
        node_config(cfg),
        PrivacyLedger(target_delta=cfg.delta),
        eta=cfg.eta,
        divisor=cfg.divisor,
        seed=cfg.seed,
        evaluate=evaluate,
    )


@dataclass
class RunReport:
    metric_name: str
    metrics: list[dict]
    epsilon: list[dict]
    timings_path: str | None
    verdict: str
    rejection: dict | None
    final: ModelParams | None = field(default=None, repr=False)
    outcome: ScheduleOutcome | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "metric": self.metric_name,
            "rounds_completed": len(self.metrics),
            "final_metric": self.metrics[-1].get("metric") if self.metrics else None,
            "epsilon": self.epsilon,
            "timings": self.timings_path,
            "verdict": self.verdict,
            "rejection": self.rejection,
        }


def simulate(
    cfg: ScenarioConfig,
    out_dir: str | Path | None = None,
    request: TrainingRequest | None = None,
    capture: Capture | None = None,
    world: World | None = None,
    evaluate: bool = True,
) -> RunReport:
    """Run a scenario with in-process nodes and optionally write a run dir."""
    world = world or build_world(cfg)
    nodes = {
        d.user_id: InProcessNode(EdgeNode(d.user_id, world.membership[d.user_id], world.policies[world.membership[d.user_id]], d), capture)
        for d in world.datasets
    }
    token = "local-simulation"
    request = request or build_request(cfg, token)
    coord = _make_coordinator(cfg, nodes, request.token or token)
    outcome = _run(coord, cfg, request, _evaluator(world) if evaluate else None)
    report = _report(cfg, outcome)
    report.outcome = outcome
    out_dir = out_dir or cfg.output_dir
    if out_dir is not None:
        write_run_dir(Path(out_dir), cfg, outcome, report)
    return report


def _report(cfg: ScenarioConfig, outcome: ScheduleOutcome, timings_path: str | None = None) -> RunReport:
    metric = "auc" if cfg.task_kind == "classification-2class" else "accuracy"
    verdict = "FINAL" if outcome.accepted else "REJECTED"
    return RunReport(metric, outcome.metrics, outcome.ledger.report(cfg.delta), timings_path, verdict,
                     outcome.rejection, outcome.final)


def timings_csv(outcome: ScheduleOutcome) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "participant", "ttd_ms", "tte_ms", "ttr_ms", "ttp_ms"])
    for t in outcome.timings:
        for row in t.rows():
            w.writerow([row[0], row[1], *(f"{x:.6f}" for x in row[2:])])
    return buf.getvalue()


def metrics_csv(outcome: ScheduleOutcome) -> str:
    rows = outcome.metrics
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_run_dir(out: Path, cfg: ScenarioConfig, outcome: ScheduleOutcome, report: RunReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "timings.csv").write_text(timings_csv(outcome))
    (out / "metrics.csv").write_text(metrics_csv(outcome))
    (out / "ledger.jsonl").write_text(outcome.ledger.to_jsonl())
    if outcome.final is not None:
        (out / "final.model").write_bytes(outcome.final.to_bytes())
    elif (out / "final.model").exists():
        (out / "final.model").unlink()
    report.timings_path = "timings.csv"
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# sockets


def serve_submission(body: Mapping, nodes: Mapping, tokens: Mapping[str, str], wait_s: float = 30.0,
                     wait_for=None) -> dict:
    """Handle one SUBMIT body against connected nodes; returns the FINAL body."""
    token = body.get("token", "")
    if not token or token not in tokens:
        raise InvalidToken("unknown application token")
    cfg = ScenarioConfig.from_dict(body["scenario"])
    if wait_for is not None and not wait_for(range(cfg.n_users), wait_s):
        raise ConnectionError("not all edge nodes connected")
    request = request_from_body(body, token) or build_request(cfg, token)
    coord = Coordinator({k: v for k, v in list(nodes.items()) if not v.closed}, tokens, timeout_s=cfg.timeout_s)
    outcome = _run(coord, cfg, request)
    if outcome.accepted:
        return {"status": "final", "model": model_to_b64(outcome.final), "epsilon": outcome.ledger.report(cfg.delta),
                "failures": outcome.failures}
    return {"status": "rejected", "rejection": outcome.rejection, "epsilon": outcome.ledger.report(cfg.delta),
            "failures": outcome.failures}


def submit(host: str, port: int, body: Mapping, timeout: float | None = None) -> Message:
    with socket.create_connection((host, port), timeout=10) as sock:
        sock.settimeout(timeout)
        send_message(sock, Message(MessageKind.SUBMIT, dict(body)))
        return recv_message(sock)


def run_over_tcp(cfg: ScenarioConfig, token: str = "tcp-token", capture: Capture | None = None,
                 body_extra: Mapping | None = None) -> Message:
    """Coordinator, every node, and the submitter on loopback in one process."""
    tokens = {token: "scenario"}
    world = build_world(cfg)
    server = CoordinatorServer("127.0.0.1", 0, lambda b, n: serve_submission(b, n, tokens, 30.0, server.wait_for_nodes), capture)
    server.start()
    stop = threading.Event()
    threads = []
    try:
        for d in world.datasets:
            g = world.membership[d.user_id]
            node = EdgeNode(d.user_id, g, world.policies[g], d)
            t = threading.Thread(target=dial_and_serve, args=(node, "127.0.0.1", server.port, stop), daemon=True)
            t.start()
            threads.append(t)
        body = {"token": token, "scenario": cfg.to_dict(), **(body_extra or {})}
        return submit("127.0.0.1", server.port, body)
    finally:
        stop.set()
        server.stop()
        for t in threads:
            t.join(timeout=5)


def final_model(msg: Message) -> ModelParams | None:
    if msg.kind == MessageKind.FINAL and msg.body.get("status") == "final":
        return model_from_b64(msg.body["model"])
    return None
