"""Edge node: holds one user's data and policy, runs local programs on request."""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .commands import default_registry
from .data import Geofence, UserDataset
from .fl import DpConfig, ModelParams, TrainConfig, make_task
from .policy import ZERO, CommandInvocation, Policy, derive, parse_policy, reduce
from .runtime import (
    CommandRegistry,
    DataPolicyPair,
    PolicyViolation,
    ProgramError,
    RestrictedProgram,
    RuntimeContext,
    final_slot,
    make_dpp,
    run_program,
)
from .wire import FrameError, Message, MessageKind, decode, encode, model_from_b64, model_to_b64, recv_message, send_message

log = logging.getLogger(__name__)

__all__ = ["EdgeNode", "participant_seed", "parse_parts", "release_to_coordinator_ok", "serve_connection", "dial_and_serve"]

ACCUMULATE = CommandInvocation("accumulate", {})


def participant_seed(seed: int, round_index: int, user_id: int, stream: int = 0) -> int:
    """Per-participant 63-bit seed; identical on every transport."""
    state = np.random.SeedSequence([seed, round_index, user_id, stream]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def parse_parts(texts: dict) -> dict[str, Policy]:
    if not isinstance(texts, dict):
        raise ValueError("policy parts must be an object")
    return {str(k): reduce(parse_policy(v)) for k, v in texts.items()}


def release_to_coordinator_ok(dpp: DataPolicyPair) -> bool:
    """An update may leave the node only if its policy still allows accumulate."""
    return all(derive(p, ACCUMULATE) != ZERO for p in dpp.parts.values())


def context_from_config(cfg: dict, round_index: int, user_id: int) -> RuntimeContext:
    seed = int(cfg.get("seed", 0))
    train = dict(cfg.get("train", {}))
    train["seed"] = participant_seed(seed, round_index, user_id, 0)
    dp = cfg.get("dp")
    return RuntimeContext(
        round_index=round_index,
        seed=seed,
        participant=user_id,
        task=make_task(cfg["task"]),
        train_cfg=TrainConfig(**train),
        dp_cfg=DpConfig.from_dict(dp) if dp else None,
        feature_columns=tuple(cfg["features"]) if cfg.get("features") else None,
        geofences={k: Geofence(**v) for k, v in cfg.get("geofences", {}).items()},
        noise_seed=participant_seed(seed, round_index, user_id, 1),
    )


@dataclass
class EdgeNode:
    """One user's trusted runtime. ``policy`` must already be macro-free."""

    user_id: int
    group: str
    policy: Policy
    dataset: UserDataset
    registry: CommandRegistry = field(default_factory=default_registry)
    tasks_handled: int = 0

    def handle(self, msg: Message) -> Message:
        if msg.kind != MessageKind.TASK:
            return Message(MessageKind.ERROR, {"code": "unexpected_kind", "detail": msg.kind.name})
        body = msg.body
        start = time.perf_counter()
        try:
            round_index = int(body["round"])
            model = model_from_b64(body["model"])
            model_dpp = DataPolicyPair(model, parse_parts(body.get("policy", {})))
            prog = RestrictedProgram.from_json(body["program"])
            ctx = context_from_config(body["config"], round_index, self.user_id)
        except (KeyError, TypeError, ValueError) as e:
            return Message(MessageKind.ERROR, {"code": "bad_task", "detail": str(e)})
        self.tasks_handled += 1
        base = {"round": round_index, "participant": self.user_id}
        try:
            slots = {"model": model_dpp, "user": make_dpp(self.dataset, {self.group: self.policy})}
            slots.update(run_program(prog, slots, self.registry, ctx))
            out = slots[final_slot(prog, "model")]
            if not release_to_coordinator_ok(out):
                raise PolicyViolation(ACCUMULATE, out.policy)
            if not isinstance(out._value, ModelParams) or not out._value.conformable(model):
                raise ProgramError("local program did not produce a model-shaped update")
            tte = (time.perf_counter() - start) * 1000
            body_out = {**base, "status": "ok", "update": model_to_b64(out._value), "policy": out.policy_texts(), "tte_ms": tte}
        except PolicyViolation as e:
            tte = (time.perf_counter() - start) * 1000
            body_out = {**base, "status": "violation", "error": "PolicyViolation", "detail": str(e), "tte_ms": tte}
        except Exception as e:  # contained: the node reports and keeps serving
            tte = (time.perf_counter() - start) * 1000
            body_out = {**base, "status": "error", "error": type(e).__name__, "detail": str(e), "tte_ms": tte}
        return Message(MessageKind.RESULT, body_out)

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            msg = decode(frame)
        except FrameError as e:
            return encode(Message(MessageKind.ERROR, {"code": type(e).__name__, "detail": str(e)}))
        return encode(self.handle(msg))


def serve_connection(sock: socket.socket, node: EdgeNode) -> None:
    """Answer frames until the peer closes; a bad frame gets ERROR and a reset."""
    with sock:
        while True:
            try:
                msg = recv_message(sock)
            except EOFError:
                return
            except FrameError as e:
                try:
                    send_message(sock, Message(MessageKind.ERROR, {"code": type(e).__name__, "detail": str(e)}))
                except OSError:
                    pass
                return
            except OSError:
                return
            try:
                send_message(sock, node.handle(msg))
            except OSError:
                return


def dial_and_serve(
    node: EdgeNode,
    host: str,
    port: int,
    stop: threading.Event | None = None,
    retry_s: float = 0.2,
    max_failures: int | None = 50,
) -> None:
    """Connect to the coordinator, say HELLO, serve; reconnect after resets."""
    stop = stop or threading.Event()
    failures = 0
    while not stop.is_set():
        try:
            sock = socket.create_connection((host, port), timeout=5)
        except OSError:
            failures += 1
            if max_failures is not None and failures >= max_failures:
                return
            stop.wait(retry_s)
            continue
        failures = 0
        sock.settimeout(None)
        try:
            send_message(sock, Message(MessageKind.HELLO, {"user_id": node.user_id, "group": node.group}))
        except OSError:
            sock.close()
            continue
        serve_connection(sock, node)
        stop.wait(retry_s)
