"""Coordinator: participant sampling, rounds, group schedules, TCP service.

Rounds talk to nodes through ``NodeHandle.exchange`` which moves encoded
frames, so the in-process transport and real sockets run the same code and
produce the same bytes.
"""

from __future__ import annotations

import logging
import select
import socket
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .accountant import BudgetExceeded, PrivacyLedger
from .commands import default_registry
from .edge import ACCUMULATE, EdgeNode, parse_parts, release_to_coordinator_ok
from .fl import DpConfig, ModelParams
from .policy import ZERO, CommandInvocation, Policy, derive
from .runtime import (
    CommandRegistry,
    DataPolicyPair,
    PolicyViolation,
    ProgramError,
    RestrictedProgram,
    RuntimeContext,
    can_return,
    check_program,
    discharge_obligations,
    final_slot,
    invoke,
    release,
    run_program,
    validate_program,
)
from .wire import (
    FrameError,
    Message,
    MessageKind,
    decode,
    encode,
    model_from_b64,
    model_to_b64,
    recv_message,
    send_message,
)

log = logging.getLogger(__name__)

__all__ = [
    "InvalidToken",
    "RoundFailed",
    "NodeHandle",
    "InProcessNode",
    "SocketNode",
    "Capture",
    "RoundTiming",
    "RoundResult",
    "Phase",
    "GroupSchedule",
    "TrainingRequest",
    "ScheduleOutcome",
    "Coordinator",
    "CoordinatorServer",
    "sample_participants",
]

FIRST_ROUND_TIMEOUT_S = 60.0
MIN_TIMEOUT_S = 2.0


class InvalidToken(PermissionError):
    pass


class RoundFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# transports


@dataclass
class Capture:
    """Every frame that crossed a transport, for traffic inspection."""

    frames: list[tuple[str, int, bytes]] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, direction: str, node: int, data: bytes):
        with self.lock:
            self.frames.append((direction, node, data))

    def from_node(self, node: int) -> list[bytes]:
        return [d for direction, n, d in self.frames if direction == "up" and n == node]


@dataclass
class Exchange:
    reply: bytes
    ttd_ms: float
    ttr_ms: float
    span_ms: float


class NodeHandle:
    node_id: int

    def exchange(self, frame: bytes, timeout: float | None) -> Exchange:
        raise NotImplementedError


class InProcessNode(NodeHandle):
    """Direct call into an ``EdgeNode`` with frame bytes in both directions.

    ``crashed`` makes the next exchanges fail like a dead peer; ``delay_s``
    simulates a slow node.
    """

    def __init__(self, node: EdgeNode, capture: Capture | None = None):
        self.node = node
        self.node_id = node.user_id
        self.capture = capture
        self.crashed = False
        self.delay_s = 0.0

    def exchange(self, frame, timeout):
        t0 = time.perf_counter()
        if self.crashed:
            raise ConnectionResetError(f"node {self.node_id} is down")
        sent = bytes(frame)
        if self.capture is not None:
            self.capture.add("down", self.node_id, sent)
        t1 = time.perf_counter()
        reply = self.node.handle_frame(sent)
        if self.delay_s:
            time.sleep(self.delay_s)
        if self.crashed:
            raise ConnectionResetError(f"node {self.node_id} died mid-task")
        t2 = time.perf_counter()
        if self.capture is not None:
            self.capture.add("up", self.node_id, reply)
        t3 = time.perf_counter()
        return Exchange(reply, (t1 - t0) * 1000, (t3 - t2) * 1000, (t3 - t0) * 1000)


class SocketNode(NodeHandle):
    """A dialed-in node on a TCP connection."""

    def __init__(self, node_id: int, sock: socket.socket, capture: Capture | None = None):
        self.node_id = node_id
        self.sock = sock
        self.capture = capture
        self.lock = threading.Lock()
        self.closed = False

    def exchange(self, frame, timeout):
        with self.lock:
            if self.closed:
                raise ConnectionResetError(f"node {self.node_id} disconnected")
            try:
                t0 = time.perf_counter()
                self.sock.settimeout(timeout)
                self.sock.sendall(frame)
                if self.capture is not None:
                    self.capture.add("down", self.node_id, bytes(frame))
                t1 = time.perf_counter()
                remaining = None if timeout is None else max(0.0, timeout - (t1 - t0))
                ready, _, _ = select.select([self.sock], [], [], remaining)
                if not ready:
                    raise TimeoutError(f"node {self.node_id} timed out")
                t2 = time.perf_counter()
                msg = recv_message(self.sock)
                reply = encode(msg)
                t3 = time.perf_counter()
            except (OSError, EOFError, FrameError) as e:
                self.close()
                raise ConnectionError(str(e)) from e
            if self.capture is not None:
                self.capture.add("up", self.node_id, reply)
            return Exchange(reply, (t1 - t0) * 1000, (t3 - t2) * 1000, (t3 - t0) * 1000)

    def close(self):
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# rounds


def sample_participants(members: Sequence[int], m: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample of ``m`` members without replacement, sorted by id."""
    members = sorted(members)
    if not 1 <= m <= len(members):
        raise ValueError(f"round size {m} not in [1, {len(members)}]")
    rng = np.random.default_rng([seed, round_index])
    picked = rng.choice(len(members), size=m, replace=False)
    return sorted(members[i] for i in picked)


@dataclass
class RoundTiming:
    round_index: int
    participants: dict[int, dict[str, float]] = field(default_factory=dict)
    ttp_ms: float = 0.0
    span_ms: float = 0.0

    def rows(self):
        for pid in sorted(self.participants):
            t = self.participants[pid]
            yield (self.round_index, pid, t["ttd_ms"], t["tte_ms"], t["ttr_ms"], self.ttp_ms)


@dataclass
class RoundResult:
    total: DataPolicyPair
    timing: RoundTiming
    failures: dict[int, str]
    completed: list[int]
    accumulate_ms: float


@dataclass(frozen=True)
class Phase:
    """One training stage: who trains, how long, with which DP settings."""

    name: str
    groups: tuple[str, ...]
    members: tuple[int, ...]
    rounds: int
    round_size: int
    dp: DpConfig | None = None


@dataclass(frozen=True)
class GroupSchedule:
    """Phases in execution order plus each group's (macro-free) policy.

    ``membership`` maps user id to group; policies are used for the
    pre-flight check of submitted programs.
    """

    strategy: str
    phases: tuple[Phase, ...]
    membership: Mapping[int, str] = field(default_factory=dict)
    policies: Mapping[str, Policy] = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in ("subset-only", "combined", "cascaded"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        seen: set[int] = set()
        for ph in self.phases:
            if seen & set(ph.members):
                raise ValueError("a user appears in more than one phase")
            seen |= set(ph.members)


@dataclass(frozen=True)
class TrainingRequest:
    """Token plus programs. ``group_programs`` overrides the local program
    for specific groups (groups whose policies demand different local steps)."""

    token: str
    global_program: RestrictedProgram
    local_program: RestrictedProgram
    group_programs: Mapping[str, RestrictedProgram] = field(default_factory=dict)

    def __post_init__(self):
        progs = [self.local_program, *self.group_programs.values()]
        if any(p.role != "local" for p in progs) or self.global_program.role != "global":
            raise ValueError("local programs must have role local, global program role global")

    def program_for(self, group: str | None) -> RestrictedProgram:
        return self.group_programs.get(group, self.local_program)


@dataclass
class ScheduleOutcome:
    final: ModelParams | None
    rejection: dict | None
    timings: list[RoundTiming]
    metrics: list[dict]
    ledger: PrivacyLedger
    failures: list[dict]

    @property
    def accepted(self) -> bool:
        return self.final is not None


class Coordinator:
    """Runs schedules over a set of node handles keyed by user id.

    ``config`` is the task description sent to nodes in every TASK (task
    spec, training and DP settings, feature columns, seed, geofences).
    """

    def __init__(
        self,
        nodes: Mapping[int, NodeHandle],
        tokens: Mapping[str, str] | None = None,
        registry: CommandRegistry | None = None,
        workers: int = 8,
        timeout_s: float | None = None,
    ):
        self.nodes = dict(nodes)
        self.tokens = dict(tokens or {})
        self.registry = registry or default_registry()
        self.workers = workers
        self.timeout_s = timeout_s
        self._tte_history: list[float] = []

    def authenticate(self, token: str) -> str:
        if not token or token not in self.tokens:
            raise InvalidToken("unknown application token")
        return self.tokens[token]

    def _round_timeout(self) -> float | None:
        if self.timeout_s is not None:
            return self.timeout_s
        if not self._tte_history:
            return FIRST_ROUND_TIMEOUT_S
        return max(MIN_TIMEOUT_S, 10 * statistics.median(self._tte_history) / 1000)

    def run_round(
        self,
        model: DataPolicyPair,
        participants: Sequence[int],
        local_program: RestrictedProgram | Mapping[int, RestrictedProgram],
        config: dict,
        round_index: int,
        timeout: float | None = None,
    ) -> RoundResult:
        """Distribute, collect, and accumulate one round in participant-id order.

        ``local_program`` is one program for everybody or one per participant.
        """
        if isinstance(local_program, RestrictedProgram):
            programs = {pid: local_program for pid in participants}
        else:
            programs = {pid: local_program[pid] for pid in participants}
        for prog in {id(p): p for p in programs.values()}.values():
            first = next((s for s in prog.steps if "model" in s.inputs), None)
            if first is None:
                continue
            inv = first.invocation()
            for origin, p in model.parts.items():
                if derive(p, inv) == ZERO:
                    raise PolicyViolation(inv, p, origin)
        timeout = self._round_timeout() if timeout is None else timeout
        model_b64 = model_to_b64(model._value)
        policy = model.policy_texts()
        frames = {
            pid: encode(
                Message(
                    MessageKind.TASK,
                    {"round": round_index, "participant": pid, "model": model_b64, "policy": policy,
                     "program": programs[pid].to_json(), "config": config},
                )
            )
            for pid in participants
        }
        timing = RoundTiming(round_index)
        failures: dict[int, str] = {}
        updates: dict[int, DataPolicyPair] = {}
        t_start = time.perf_counter()
        pool = ThreadPoolExecutor(max_workers=max(1, min(self.workers, len(participants))))
        try:
            futs = {}
            for pid in participants:
                if pid not in self.nodes:
                    failures[pid] = "unreachable"
                    continue
                futs[pool.submit(self.nodes[pid].exchange, frames[pid], timeout)] = pid
            done, late = wait(futs, timeout=timeout)
            for fut in late:
                failures[futs[fut]] = "timeout"
                fut.cancel()
            for fut in done:
                pid = futs[fut]
                try:
                    ex = fut.result()
                    upd, tte = self._parse_result(ex.reply, pid, round_index, model._value)
                except Exception as e:  # per-participant failures are contained
                    failures[pid] = f"{type(e).__name__}: {e}"
                    continue
                updates[pid] = upd
                timing.participants[pid] = {"ttd_ms": ex.ttd_ms, "tte_ms": tte, "ttr_ms": ex.ttr_ms, "span_ms": ex.span_ms}
        finally:
            # stragglers keep running in the background; their results are dropped
            pool.shutdown(wait=False, cancel_futures=True)
        timing.span_ms = (time.perf_counter() - t_start) * 1000
        if not updates:
            raise RoundFailed(f"round {round_index}: all {len(participants)} participants failed")
        self._tte_history = [t["tte_ms"] for t in timing.participants.values()]
        t0 = time.perf_counter()
        total = DataPolicyPair(model._value.zeros_like(), {})
        ctx = RuntimeContext(round_index=round_index)
        for pid in sorted(updates):
            total = invoke([total, updates[pid]], CommandInvocation("accumulate", {}), self.registry, ctx, "global")
        acc_ms = (time.perf_counter() - t0) * 1000
        return RoundResult(total, timing, failures, sorted(updates), acc_ms)

    def preflight(self, request: TrainingRequest, schedule: GroupSchedule) -> None:
        """Dry-run each group's local program against the group's policy.

        Runs before any TASK is sent, so a non-compliant submission touches
        no data anywhere.
        """
        groups = {g for ph in schedule.phases for g in ph.groups}
        for g in sorted(groups):
            if g not in schedule.policies:
                continue
            prog = request.program_for(g)
            slots = {"model": DataPolicyPair(None, {}), "user": DataPolicyPair(None, {g: schedule.policies[g]})}
            out = DataPolicyPair(None, check_program(prog, slots, self.registry)[final_slot(prog, "model")])
            if not release_to_coordinator_ok(out):
                raise PolicyViolation(ACCUMULATE, out.policy, g)

    @staticmethod
    def _parse_result(reply: bytes, pid: int, round_index: int, model: ModelParams):
        msg = decode(reply)
        if msg.kind != MessageKind.RESULT:
            raise ProgramError(f"node replied {msg.kind.name}: {msg.body.get('detail', '')}")
        body = msg.body
        if body.get("round") != round_index or body.get("participant") != pid:
            raise ProgramError("result for a different task")
        if body.get("status") != "ok":
            raise ProgramError(f"{body.get('error')}: {body.get('detail')}")
        update = model_from_b64(body["update"])
        model.check_conformable(update)
        tte = float(body.get("tte_ms", 0.0))
        if not tte >= 0:
            raise ProgramError("negative execution time")
        return DataPolicyPair(update, parse_parts(body.get("policy", {}))), tte

    def run_schedule(
        self,
        request: TrainingRequest,
        schedule: GroupSchedule,
        initial: ModelParams,
        config: dict,
        ledger: PrivacyLedger | None = None,
        eta: float = 1.0,
        divisor: str = "population",
        seed: int = 0,
        evaluate: Callable[[ModelParams], float] | None = None,
        on_round: Callable[[RoundTiming], None] | None = None,
    ) -> ScheduleOutcome:
        """Run every phase, then release the model only if every policy allows it.

        Between cascaded phases the model is released internally (after its
        obligations are discharged) and continues unrestricted; later phases
        never charge earlier groups.
        """
        self.authenticate(request.token)
        for prog in (request.local_program, *request.group_programs.values()):
            validate_program(prog, ["model", "user"], self.registry)
        validate_program(request.global_program, ["model", "sum"], self.registry)
        ledger = ledger or PrivacyLedger()
        for ph in schedule.phases:
            for g in ph.groups:
                ledger.register(g)
        model = DataPolicyPair(initial, {})
        timings: list[RoundTiming] = []
        metrics: list[dict] = []
        failures: list[dict] = []
        round_index = 0
        for ph in schedule.phases:
            if ph.dp is not None and ph.dp.placement == "local" and ph.dp.noise_sigma > 0:
                for g in ph.groups:
                    if not any(st.cmd == "train_local_dp" for st in request.program_for(g).steps):
                        raise ValueError(f"phase {ph.name!r} adds noise locally but group {g!r} does not run train_local_dp")
        try:
            self.preflight(request, schedule)
            for k, ph in enumerate(schedule.phases):
                dp_body = ph.dp.to_dict() if ph.dp is not None else None
                phase_cfg = {**config, "dp": dp_body}
                q = ph.round_size / len(ph.members)
                z = ph.dp.accounting_multiplier if ph.dp is not None else 0.0
                for _ in range(ph.rounds):
                    participants = sample_participants(ph.members, ph.round_size, round_index, seed)
                    programs = {pid: request.program_for(schedule.membership.get(pid)) for pid in participants}
                    res = self.run_round(model, participants, programs, phase_cfg, round_index)
                    t0 = time.perf_counter()
                    n = len(res.completed) if divisor == "round" else len(ph.members)
                    ctx = RuntimeContext(round_index=round_index, eta=eta, n=n, dp_cfg=ph.dp,
                                         noise_seed=[seed, round_index, 2**31 - 1])
                    slots = {"model": model, "sum": res.total}
                    slots.update(run_program(request.global_program, slots, self.registry, ctx))
                    model = slots[final_slot(request.global_program, "model")]
                    res.timing.ttp_ms = res.accumulate_ms + (time.perf_counter() - t0) * 1000
                    for g in ph.groups:
                        ledger.charge_round(g, q, z, round_index)
                    timings.append(res.timing)
                    failures += [{"round": round_index, "participant": p, "reason": r} for p, r in sorted(res.failures.items())]
                    row = {"round": round_index, "phase": ph.name, "completed": len(res.completed)}
                    if evaluate is not None:
                        row["metric"] = evaluate(model._value)
                    for g in ledger.groups():
                        row[f"eps_{g}"] = ledger.epsilon(g)
                    metrics.append(row)
                    if on_round is not None:
                        on_round(res.timing)
                    round_index += 1
                ctx = RuntimeContext(round_index=round_index, ledger=ledger, delta=ledger.target_delta)
                model = discharge_obligations(model, self.registry, ctx)
                if not can_return(model):
                    origin, p = next((o, p) for o, p in model.parts.items() if not can_return(DataPolicyPair(None, {o: p})))
                    raise PolicyViolation(CommandInvocation("return", {}), p, origin)
                if k < len(schedule.phases) - 1:
                    model = DataPolicyPair(release(model, self.registry, ctx), {}, model.provenance)
            final = release(model, self.registry, RuntimeContext(round_index=round_index))
        except BudgetExceeded as e:
            rej = {"error": "BudgetExceeded", "group": e.group, "spent": e.spent, "max_eps": e.max_eps, "detail": str(e)}
            return ScheduleOutcome(None, rej, timings, metrics, ledger, failures)
        except PolicyViolation as e:
            rej = {"error": "PolicyViolation", "command": e.command.name, "origin": e.origin, "detail": str(e)}
            return ScheduleOutcome(None, rej, timings, metrics, ledger, failures)
        except RoundFailed as e:
            return ScheduleOutcome(None, {"error": "RoundFailed", "detail": str(e)}, timings, metrics, ledger, failures)
        return ScheduleOutcome(final, None, timings, metrics, ledger, failures)


# ---------------------------------------------------------------------------
# TCP service


class CoordinatorServer:
    """Accepts dialed-in nodes (HELLO) and training submissions (SUBMIT).

    ``handle_submit`` receives the SUBMIT body and the connected node
    handles and returns the FINAL body.
    """

    def __init__(
        self,
        host: str,
        port: int,
        handle_submit: Callable[[dict, dict[int, SocketNode]], dict],
        capture: Capture | None = None,
    ):
        self.handle_submit = handle_submit
        self.capture = capture
        self.nodes: dict[int, SocketNode] = {}
        self.nodes_changed = threading.Condition()
        self.sock = socket.create_server((host, port))
        self.port = self.sock.getsockname()[1]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.submissions = 0
        self.replies_sent = 0

    def start(self) -> "CoordinatorServer":
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def wait_for_nodes(self, ids, timeout: float) -> bool:
        ids = set(ids)
        deadline = time.monotonic() + timeout
        with self.nodes_changed:
            while True:
                live = {i for i, n in self.nodes.items() if not n.closed}
                if ids <= live:
                    return True
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self.nodes_changed.wait(left)

    def wait_for_replies(self, n: int, stop: threading.Event | None = None) -> None:
        """Block until ``n`` submissions have been answered (or ``stop`` is set)."""
        with self.nodes_changed:
            while self.replies_sent < n and not (stop is not None and stop.is_set()):
                self.nodes_changed.wait(0.2)

    def _accept_loop(self):
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._first_frame, args=(conn,), daemon=True)
            t.start()

    def _first_frame(self, conn: socket.socket):
        conn.settimeout(10)
        try:
            msg = recv_message(conn)
        except (FrameError, EOFError, OSError) as e:
            try:
                send_message(conn, Message(MessageKind.ERROR, {"code": type(e).__name__, "detail": str(e)}))
            except OSError:
                pass
            conn.close()
            return
        if msg.kind == MessageKind.HELLO:
            try:
                uid = int(msg.body["user_id"])
            except (KeyError, TypeError, ValueError):
                send_message(conn, Message(MessageKind.ERROR, {"code": "bad_hello", "detail": "user_id required"}))
                conn.close()
                return
            conn.settimeout(None)
            with self.nodes_changed:
                old = self.nodes.get(uid)
                if old is not None:
                    old.close()
                self.nodes[uid] = SocketNode(uid, conn, self.capture)
                self.nodes_changed.notify_all()
            return
        if msg.kind == MessageKind.SUBMIT:
            self.submissions += 1
            try:
                # live table: the handler may wait for more nodes to dial in
                reply = Message(MessageKind.FINAL, self.handle_submit(dict(msg.body), self.nodes))
            except InvalidToken as e:
                reply = Message(MessageKind.ERROR, {"code": "InvalidToken", "detail": str(e)})
            except Exception as e:  # reported to the submitter, server keeps running
                log.exception("submission failed")
                reply = Message(MessageKind.ERROR, {"code": type(e).__name__, "detail": str(e)})
            try:
                data = encode(reply)
            except (ValueError, FrameError) as e:
                data = encode(Message(MessageKind.ERROR, {"code": type(e).__name__, "detail": str(e)}))
            try:
                conn.settimeout(None)
                conn.sendall(data)
            except OSError:
                pass
            conn.close()
            with self.nodes_changed:
                self.replies_sent += 1
                self.nodes_changed.notify_all()
            return
        try:
            send_message(conn, Message(MessageKind.ERROR, {"code": "unexpected_kind", "detail": msg.kind.name}))
        except OSError:
            pass
        conn.close()

    def stop(self):
        self._stop.set()
        try:
            self.sock.close()
        except OSError:
            pass
        for n in list(self.nodes.values()):
            n.close()
