import base64
import socket
import struct
import threading

import numpy as np
import pytest

from polifed.commands import default_registry
from polifed.coordinator import (
    Capture,
    Coordinator,
    CoordinatorServer,
    InProcessNode,
    InvalidToken,
    RoundFailed,
    sample_participants,
)
from polifed.data import generate_task
from polifed.edge import EdgeNode, serve_connection
from polifed.fl import ModelParams, SoftmaxRegression, TrainConfig, accumulate, train_local
from polifed.policy import expand_macros, parse_policy, reduce
from polifed.runtime import CommandRegistry, CommandSpec, DataPolicyPair, RestrictedProgram, Step
from polifed.scenario import (
    GroupConfig,
    ScenarioConfig,
    build_request,
    build_schedule,
    build_world,
    compliant_local_program,
    final_model,
    node_config,
    run_over_tcp,
    serve_submission,
    simulate,
    submit,
)
from polifed.wire import Message, MessageKind, decode, encode, model_to_b64, recv_message, send_message

CIFAR = 'get_data(data_type="cifar") . runFL . return'
FEATURES = ("f0", "f1", "f2", "f3")


def policy(text):
    return reduce(expand_macros(parse_policy(text)))


def cifar_world(n=6, rows=20, texts=None, seed=0):
    users = generate_task("multiclass-10", n, rows, seed=seed)
    texts = texts or {}
    nodes = {}
    for d in users:
        text = texts.get(d.user_id, CIFAR)
        nodes[d.user_id] = EdgeNode(d.user_id, "g", policy(text), d)
    return users, nodes


def config(seed=0):
    return {
        "task": {"kind": "softmax", "n_features": 4, "n_classes": 10},
        "train": {"epochs": 1, "local_lr": 0.1, "batch_size": 8},
        "features": list(FEATURES),
        "seed": seed,
    }


LOCAL = compliant_local_program(policy(CIFAR))
TASK = SoftmaxRegression(4, 10)


def coordinator(nodes, capture=None, **kw):
    return Coordinator({u: InProcessNode(n, capture) for u, n in nodes.items()}, {"tok": "svc"}, **kw)


def model_dpp():
    return DataPolicyPair(TASK.init_params(), {})


# authentication and sampling


def test_authenticate():
    coord = Coordinator({}, {"tok": "svc"})
    assert coord.authenticate("tok") == "svc"
    for bad in ("", "nope"):
        with pytest.raises(InvalidToken):
            coord.authenticate(bad)


def test_invalid_token_runs_nothing():
    cfg = _two_group_cfg("combined")
    world = build_world(cfg)
    capture = Capture()
    nodes = {d.user_id: InProcessNode(EdgeNode(d.user_id, world.membership[d.user_id], world.policies[world.membership[d.user_id]], d), capture) for d in world.datasets}
    coord = Coordinator(nodes, {"real": "svc"})
    with pytest.raises(InvalidToken):
        coord.run_schedule(build_request(cfg, "fake"), build_schedule(cfg), TASK.init_params(), node_config(cfg))
    assert capture.frames == []
    assert all(n.node.tasks_handled == 0 for n in nodes.values())


def test_sampling_basics():
    members = list(range(10, 30))
    assert sample_participants(members, 20, 3, 1) == members
    assert sample_participants(members, 5, 3, 1) == sample_participants(members, 5, 3, 1)
    assert sample_participants(members, 5, 3, 1) != sample_participants(members, 5, 4, 1)
    with pytest.raises(ValueError):
        sample_participants(members, 21, 0, 0)
    with pytest.raises(ValueError):
        sample_participants(members, 0, 0, 0)


def test_sampling_frequency():
    counts = np.zeros(100)
    for r in range(1000):
        picked = sample_participants(range(100), 10, r, seed=5)
        assert len(set(picked)) == 10
        counts[picked] += 1
    sd = np.sqrt(1000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 100) <= 3 * sd + 1)


# rounds


def _expected_update(d, model, cfg, pid, round_index):
    from polifed.edge import participant_seed

    tc = TrainConfig(**cfg["train"], seed=participant_seed(cfg["seed"], round_index, pid, 0))
    local = train_local(model, (d.features(FEATURES), d.labels()), tc, TASK)
    return local.flat - model.flat


def test_single_participant_sum_is_its_update():
    users, nodes = cifar_world()
    res = coordinator(nodes).run_round(model_dpp(), [2], LOCAL, config(), 0)
    assert np.array_equal(res.total._value.flat, _expected_update(users[2], TASK.init_params(), config(), 2, 0))
    assert res.completed == [2] and res.failures == {}


def test_forbidding_policy_is_contained():
    users, nodes = cifar_world(texts={3: 'get_data(data_type="cifar") . average . return'})
    coord = coordinator(nodes)
    res = coord.run_round(model_dpp(), [1, 3, 4], LOCAL, config(), 0)
    assert set(res.failures) == {3} and "PolicyViolation" in res.failures[3]
    others = coord.run_round(model_dpp(), [1, 4], LOCAL, config(), 0)
    assert res.total._value == others.total._value


def test_accumulation_order_is_participant_id():
    users, nodes = cifar_world()
    res = coordinator(nodes, workers=4).run_round(model_dpp(), [0, 1, 2, 3, 4, 5], LOCAL, config(), 7)
    total = TASK.init_params().zeros_like()
    for pid in range(6):
        total = accumulate(total, total.with_flat(_expected_update(users[pid], TASK.init_params(), config(), pid, 7)))
    assert res.total._value == total


def test_crash_containment():
    users, nodes = cifar_world(n=10)
    coord = coordinator(nodes)
    for pid in (2, 7):
        coord.nodes[pid].crashed = True
    res = coord.run_round(model_dpp(), list(range(10)), LOCAL, config(), 0)
    assert set(res.failures) == {2, 7}
    assert len(res.completed) == 8
    healthy = coordinator(nodes).run_round(model_dpp(), [p for p in range(10) if p not in (2, 7)], LOCAL, config(), 0)
    assert res.total._value == healthy.total._value


def test_all_failed_round():
    users, nodes = cifar_world(n=3)
    coord = coordinator(nodes)
    for h in coord.nodes.values():
        h.crashed = True
    with pytest.raises(RoundFailed):
        coord.run_round(model_dpp(), [0, 1, 2], LOCAL, config(), 0)


def test_straggler_times_out():
    users, nodes = cifar_world(n=4)
    coord = coordinator(nodes)
    coord.nodes[1].delay_s = 1.5
    res = coord.run_round(model_dpp(), [0, 1, 2, 3], LOCAL, config(), 0, timeout=0.5)
    assert res.failures == {1: "timeout"}
    assert res.completed == [0, 2, 3]


def test_default_timeout_rules():
    users, nodes = cifar_world(n=3)
    coord = coordinator(nodes)
    assert coord._round_timeout() == 60.0
    coord.run_round(model_dpp(), [0, 1, 2], LOCAL, config(), 0)
    assert coord._round_timeout() == 2.0  # 10x median TTE is far below the floor here
    coord._tte_history = [400.0, 500.0, 900.0]
    assert coord._round_timeout() == pytest.approx(5.0)


def test_unreachable_participant():
    users, nodes = cifar_world(n=3)
    coord = coordinator({0: nodes[0], 1: nodes[1]})
    res = coord.run_round(model_dpp(), [0, 1, 2], LOCAL, config(), 0)
    assert res.failures == {2: "unreachable"}


def test_model_policy_must_allow_distribution():
    users, nodes = cifar_world(n=2)
    locked = DataPolicyPair(TASK.init_params(), {"x": policy("average")})
    from polifed.runtime import PolicyViolation

    with pytest.raises(PolicyViolation):
        coordinator(nodes).run_round(locked, [0], LOCAL, config(), 0)


def test_timing_records():
    users, nodes = cifar_world(n=100, rows=10)
    res = coordinator(nodes).run_round(model_dpp(), list(range(100)), LOCAL, config(), 0)
    assert sorted(res.timing.participants) == list(range(100))
    for t in res.timing.participants.values():
        assert min(t["ttd_ms"], t["tte_ms"], t["ttr_ms"]) >= 0
        assert t["ttd_ms"] + t["tte_ms"] + t["ttr_ms"] <= t["span_ms"] + 1e-6
    rows = list(res.timing.rows())
    assert len(rows) == 100 and rows[0][:2] == (0, 0)


# schedules


def _two_group_cfg(strategy, rounds=6, dp2=None, budgets=(None, None), n=12, **kw):
    groups = (
        GroupConfig("Gr1", CIFAR, 0.5, dp={"clip_bound": 1.0, "noise_sigma": 0.5, "round_size": 3, "placement": "server"},
                    max_epsilon=budgets[0]),
        GroupConfig("Gr2", CIFAR, 0.5, dp=dp2 or {"clip_bound": 1.0, "noise_sigma": 0.05, "round_size": 3, "placement": "server"},
                    max_epsilon=budgets[1]),
    )
    return ScenarioConfig("multiclass-10", n, groups, rows_per_user=15, strategy=strategy, rounds=rounds, round_size=3, **kw)


def test_combined_charges_both_groups_equally():
    rep = simulate(_two_group_cfg("combined"), evaluate=False)
    eps = {r["group"]: r["epsilon"] for r in rep.epsilon}
    assert eps["Gr1"] == eps["Gr2"] > 0
    assert rep.outcome.ledger.rounds("Gr1") == 6


def test_cascaded_charges_each_group_in_its_phase():
    rep = simulate(_two_group_cfg("cascaded"), evaluate=False)
    records = rep.outcome.ledger.records
    assert [r["group"] for r in records] == ["Gr1"] * 3 + ["Gr2"] * 3
    assert [r["round_index"] for r in records] == list(range(6))
    phases = [row["phase"] for row in rep.metrics]
    assert phases == ["Gr1"] * 3 + ["Gr2"] * 3


def test_cascade_order_is_most_restrictive_first():
    cfg = _two_group_cfg("cascaded", budgets=(5.0, 1.0))
    assert [ph.name for ph in build_schedule(cfg).phases] == ["Gr2", "Gr1"]


def test_budget_failure_releases_nothing():
    cfg = _two_group_cfg("combined", rounds=4, budgets=(1e-3, None))
    groups = tuple(GroupConfig(g.name, g.policy.replace("return", "enforce_dp_budget(eps=0.001) . return") if g.name == "Gr1" else g.policy,
                               g.fraction, g.dp, g.max_epsilon) for g in cfg.groups)
    cfg = ScenarioConfig(**{**cfg.__dict__, "groups": groups})
    rep = simulate(cfg, evaluate=False)
    assert rep.final is None and rep.verdict == "REJECTED"
    assert rep.rejection["error"] == "BudgetExceeded" and rep.rejection["group"] == "Gr1"


def test_local_noise_requires_dp_training_step():
    dp = {"clip_bound": 1.0, "noise_sigma": 0.5, "round_size": 3, "placement": "local"}
    cfg = _two_group_cfg("subset-only", dp2=dp, subset_group="Gr2")
    world = build_world(cfg)
    nodes = {d.user_id: InProcessNode(EdgeNode(d.user_id, world.membership[d.user_id], world.policies[world.membership[d.user_id]], d)) for d in world.datasets}
    plain = RestrictedProgram("local", (Step("get_data", {"data_type": "cifar"}, ("user",), "d"), Step("train_local", {}, ("model", "d"), "u")))
    req = build_request(cfg, "tok")
    req = type(req)("tok", req.global_program, plain, {})
    with pytest.raises(ValueError):
        Coordinator(nodes, {"tok": "s"}).run_schedule(req, build_schedule(cfg), TASK.init_params(), node_config(cfg))


# fail-closed release


SENTINEL = struct.pack("<d", 1234.5678125)


def sentinel_registry():
    reg = default_registry()
    specs = [reg[n] for n in reg.names() if n != "train_local"]

    def leaky_train(values, args, ctx):
        model, _ = values
        return model.with_flat(np.full(model.flat.size, 1234.5678125))

    return CommandRegistry(specs + [CommandSpec("train_local", leaky_train, 2, "local")])


def _b64_variants(raw: bytes):
    # base64 of ``raw`` at each of the three alignments
    out = []
    for shift in range(3):
        enc = base64.b64encode(b"\x00" * shift + raw).decode()
        out.append(enc[4 * ((shift + 2) // 3) : -4].encode())
    return out


def _contains_model_bytes(frame: bytes) -> bool:
    return any(v in frame for v in _b64_variants(SENTINEL * 6)) or SENTINEL * 2 in frame


def test_sentinel_scan_release_gate():
    users = generate_task("multiclass-10", 2, 10, seed=0)
    capture = Capture()
    nodes = {
        0: EdgeNode(0, "open", policy(CIFAR), users[0], sentinel_registry()),
        # may train but never hand the result to the coordinator
        1: EdgeNode(1, "closed", policy('get_data(data_type="cifar") . train_local . return'), users[1], sentinel_registry()),
    }
    res = coordinator(nodes, capture).run_round(model_dpp(), [0, 1], LOCAL, config(), 0)
    assert res.completed == [0] and 1 in res.failures
    up0, up1 = capture.from_node(0), capture.from_node(1)
    assert up0 and up1
    assert any(_contains_model_bytes(f) for f in up0)  # the scan does see leaked parameters
    assert not any(_contains_model_bytes(f) for f in up1)
    assert all("update" not in decode(f).body for f in up1)


def test_rejected_final_has_no_model():
    cfg = _two_group_cfg("combined", rounds=2)
    groups = tuple(GroupConfig(g.name, g.policy.replace("return", "enforce_dp_budget(eps=0.0001) . return"), g.fraction, g.dp)
                   for g in cfg.groups)
    cfg = ScenarioConfig(**{**cfg.__dict__, "groups": groups})
    world = build_world(cfg)
    nodes = {d.user_id: InProcessNode(EdgeNode(d.user_id, world.membership[d.user_id], world.policies[world.membership[d.user_id]], d)) for d in world.datasets}
    body = serve_submission({"token": "t", "scenario": cfg.to_dict()}, _Live(nodes), {"t": "svc"})
    assert body["status"] == "rejected" and "model" not in body
    frame = encode(Message(MessageKind.FINAL, body))
    header = TASK.init_params().to_bytes()[:12]
    assert not any(v in frame for v in _b64_variants(header))


class _Live(dict):
    """In-process handles with the ``closed`` flag the server table exposes."""

    def __init__(self, nodes):
        super().__init__(nodes)
        for n in nodes.values():
            n.closed = False


# edge node


def _task_frame(pid=0, round_index=0, program=LOCAL):
    return encode(Message(MessageKind.TASK, {"round": round_index, "participant": pid, "model": model_to_b64(TASK.init_params()),
                                             "policy": {}, "program": program.to_json(), "config": config()}))


def test_edge_replies():
    users, nodes = cifar_world(n=1)
    node = nodes[0]
    ok = decode(node.handle_frame(_task_frame()))
    assert ok.kind == MessageKind.RESULT and ok.body["status"] == "ok" and ok.body["tte_ms"] >= 0
    assert decode(node.handle_frame(b"\x00\x00")).kind == MessageKind.ERROR
    assert decode(node.handle_frame(encode(Message(MessageKind.HELLO, {})))).kind == MessageKind.ERROR
    assert decode(node.handle_frame(encode(Message(MessageKind.TASK, {"round": 0})))).body["code"] == "bad_task"
    bad_prog = RestrictedProgram("local", (Step("filter", {}, ("user",), "d"), Step("train_local", {}, ("model", "d"), "u")))
    viol = decode(node.handle_frame(_task_frame(program=bad_prog)))
    assert viol.body["status"] == "violation" and "update" not in viol.body


def test_edge_survives_garbage_over_socket():
    users, nodes = cifar_world(n=1)
    node = nodes[0]
    for junk in (b"\xff\xff\xff\xff", b"\x00\x00\x00\x03\x09\x02{}", b"\x00\x00\x00\x04\x01\x02{]"):
        a, b = socket.socketpair()
        t = threading.Thread(target=serve_connection, args=(b, node))
        t.start()
        a.sendall(junk)
        assert recv_message(a).kind == MessageKind.ERROR
        t.join(timeout=5)
        assert not t.is_alive()
        a.close()
    a, b = socket.socketpair()
    t = threading.Thread(target=serve_connection, args=(b, node))
    t.start()
    a.sendall(b"\x00\x00\x01\x00\x01\x02{")  # truncated: peer goes away mid-frame
    a.close()
    t.join(timeout=5)
    a, b = socket.socketpair()
    t = threading.Thread(target=serve_connection, args=(b, node))
    t.start()
    a.sendall(_task_frame())
    assert recv_message(a).body["status"] == "ok"
    a.close()
    t.join(timeout=5)


def test_coordinator_survives_garbage():
    server = CoordinatorServer("127.0.0.1", 0, lambda body, nodes: {"status": "echo", "n": len(nodes)}).start()
    try:
        for junk in (b"garbage!", b"\x00\x00\x00\x09\x01\x01{", b"\x00\x00\x00\x02\x07\x01", b"\x00\x00\x00\x04\x01\x03{}"):
            with socket.create_connection(("127.0.0.1", server.port)) as s:
                s.sendall(junk)
                try:
                    s.shutdown(socket.SHUT_WR)
                except OSError:
                    pass  # the server may already have replied and closed
                reply = recv_message(s)
                assert reply.kind == MessageKind.ERROR
        # a fake node that answers TASKs with junk is contained as a failure
        fake = socket.create_connection(("127.0.0.1", server.port))
        send_message(fake, Message(MessageKind.HELLO, {"user_id": 0, "group": "g"}))
        assert server.wait_for_nodes([0], 5)

        def junk_node():
            try:
                recv_message(fake)
                fake.sendall(b"\x00\x00\x00\x05\x01\x03{{{")
            except OSError:
                pass

        t = threading.Thread(target=junk_node)
        t.start()
        coord = Coordinator(dict(server.nodes), {"tok": "s"})
        with pytest.raises(RoundFailed):
            coord.run_round(model_dpp(), [0], LOCAL, config(), 0, timeout=5)
        t.join(timeout=5)
        fake.close()
        reply = submit("127.0.0.1", server.port, {"token": "x"}, timeout=5)
        assert reply.kind == MessageKind.FINAL and reply.body["status"] == "echo"
    finally:
        server.stop()


def test_tcp_invalid_token():
    cfg = _two_group_cfg("combined", rounds=1)
    msg = run_over_tcp(cfg, token="right", body_extra={"token": "wrong"})
    assert msg.kind == MessageKind.ERROR and msg.body["code"] == "InvalidToken"


def test_simulate_and_tcp_agree():
    cfg = _two_group_cfg("cascaded", rounds=4)
    sim = simulate(cfg, evaluate=False).final
    msg = run_over_tcp(cfg)
    assert msg.kind == MessageKind.FINAL, msg.body
    assert final_model(msg).to_bytes() == sim.to_bytes()
    assert isinstance(sim, ModelParams)
