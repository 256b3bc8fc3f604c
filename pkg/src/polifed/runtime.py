"""Data-Policy Pairs and the restricted-program interpreter.

A ``DataPolicyPair`` binds an opaque payload to a policy. Payloads are only
touched by hooks in a ``CommandRegistry``; every hook call is preceded by a
derivative check of each input's policy, so an unauthorized use is rejected
before it runs.

A pair keeps one residual policy per *origin* (the privacy group a piece of
data came from). The effective policy is the intersection of the parts.
Keeping the parts apart lets budget obligations such as
``enforce_dp_budget(eps=1)`` be discharged against the ledger of the group
that asked for them.
"""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Callable, Mapping, Sequence

from .policy import (
    TOP,
    ZERO,
    CommandInvocation,
    Policy,
    command_patterns,
    derive,
    emptiness,
    inter,
    parse_policy,
    reduce,
)

__all__ = [
    "ProgramError",
    "PolicyViolation",
    "UnknownCommand",
    "SiteMismatch",
    "SlotReuse",
    "MissingSlot",
    "ArityMismatch",
    "DataPolicyPair",
    "CommandSpec",
    "CommandRegistry",
    "RuntimeContext",
    "Step",
    "RestrictedProgram",
    "RETURN",
    "make_dpp",
    "invoke",
    "can_return",
    "check_program",
    "run_program",
    "discharge_obligations",
    "release",
]

RETURN = CommandInvocation("return", {})
SITES = ("local", "global", "both")


class ProgramError(Exception):
    pass


class PolicyViolation(ProgramError):
    def __init__(self, command: CommandInvocation, policy: Policy, origin: str | None = None):
        where = f" (origin {origin!r})" if origin is not None else ""
        super().__init__(f"{command} not permitted by policy {policy.text!r}{where}")
        self.command = command
        self.policy = policy
        self.origin = origin


class UnknownCommand(ProgramError, KeyError):
    def __str__(self):
        return f"unknown command {self.args[0]!r}"


class SiteMismatch(ProgramError):
    pass


class SlotReuse(ProgramError):
    pass


class MissingSlot(ProgramError):
    pass


class ArityMismatch(ProgramError):
    pass


@dataclass(frozen=True, eq=False)
class DataPolicyPair:
    """Opaque payload plus per-origin residual policies.

    ``parts`` maps origin to a reduced policy; an empty map means the
    unrestricted policy. ``provenance`` lists ``(command, round)`` pairs
    applied so far and is kept for auditing only.
    """

    _value: Any = field(repr=False)
    parts: Mapping[str, Policy] = field(default_factory=dict)
    provenance: tuple[tuple[str, int | None], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parts", MappingProxyType(dict(self.parts)))

    @property
    def policy(self) -> Policy:
        if not self.parts:
            return TOP
        return inter(*self.parts.values())

    def policy_texts(self) -> dict[str, str]:
        return {k: p.text for k, p in sorted(self.parts.items())}

    def __repr__(self):
        return f"DataPolicyPair(<opaque>, parts={self.policy_texts()!r})"


def make_dpp(value, policy: Policy | str | Mapping[str, Policy | str] | None = None, origin: str = "data") -> DataPolicyPair:
    """Build a pair from a single policy (under ``origin``) or a parts map."""
    if policy is None:
        parts = {}
    elif isinstance(policy, Mapping):
        parts = {k: reduce(parse_policy(v) if isinstance(v, str) else v) for k, v in policy.items()}
    else:
        parts = {origin: reduce(parse_policy(policy) if isinstance(policy, str) else policy)}
    return DataPolicyPair(value, parts)


Hook = Callable[[list, Mapping[str, Any], "RuntimeContext"], Any]


@dataclass(frozen=True)
class CommandSpec:
    """A trusted command: hook, input count, execution site.

    ``obligation`` marks checks a policy may require before release; they
    pass the payload through unchanged and are discharged per origin.
    """

    name: str
    hook: Hook
    arity: int
    site: str
    obligation: bool = False

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"site must be one of {SITES}")
        if self.arity < 1:
            raise ValueError("arity must be >= 1")


class CommandRegistry:
    """Fixed table of commands. ``calls`` counts hook executions per command."""

    def __init__(self, specs: Sequence[CommandSpec]):
        table = {}
        for s in specs:
            if s.name in table:
                raise ValueError(f"duplicate command {s.name!r}")
            table[s.name] = s
        self._specs = MappingProxyType(table)
        self.calls: Counter = Counter()
        self._lock = threading.Lock()

    def __contains__(self, name):
        return name in self._specs

    def __getitem__(self, name) -> CommandSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownCommand(name) from None

    def names(self) -> list[str]:
        return list(self._specs)

    def obligations(self) -> list[str]:
        return [n for n, s in self._specs.items() if s.obligation]

    def available(self, name: str, site: str | None) -> bool:
        return name in self._specs and (site is None or self._specs[name].site in (site, "both"))

    def run_hook(self, name: str, values: list, args: Mapping, ctx: "RuntimeContext"):
        with self._lock:
            self.calls[name] += 1
        return self._specs[name].hook(values, args, ctx)

    def fresh(self) -> "CommandRegistry":
        """Same commands, zeroed counters."""
        return CommandRegistry(list(self._specs.values()))


@dataclass(frozen=True)
class RuntimeContext:
    """Trusted parameters hooks may read; never visible to programs."""

    round_index: int | None = None
    seed: int = 0
    participant: int | None = None
    origin: str | None = None
    task: Any = None
    train_cfg: Any = None
    dp_cfg: Any = None
    feature_columns: tuple[str, ...] | None = None
    ledger: Any = None
    delta: float | None = None
    geofences: Mapping[str, Any] = field(default_factory=dict)
    eta: float = 1.0
    n: int | None = None
    noise_seed: Any = None

    def with_(self, **kw) -> "RuntimeContext":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# single command


def _derive_parts(inputs: Sequence[DataPolicyPair], cmd: CommandInvocation) -> dict[str, Policy]:
    """Per-origin intersection of derivatives; raise on the first Zero."""
    grouped: dict[str, list[Policy]] = {}
    for dpp in inputs:
        for origin, p in dpp.parts.items():
            d = derive(p, cmd)
            if d == ZERO:
                raise PolicyViolation(cmd, p, origin)
            grouped.setdefault(origin, []).append(d)
    out = {}
    for origin, ds in grouped.items():
        merged = inter(*ds)
        if merged == ZERO:
            raise PolicyViolation(cmd, inter(*(dpp.parts[origin] for dpp in inputs if origin in dpp.parts)), origin)
        out[origin] = merged
    return out


def _check_shape(spec: CommandSpec, n_inputs: int, site: str | None):
    if site is not None and spec.site not in (site, "both"):
        raise SiteMismatch(f"{spec.name!r} runs on {spec.site}, not {site}")
    if n_inputs != spec.arity:
        raise ArityMismatch(f"{spec.name!r} takes {spec.arity} input(s), got {n_inputs}")


def invoke(
    inputs: Sequence[DataPolicyPair],
    cmd: CommandInvocation,
    registry: CommandRegistry,
    ctx: RuntimeContext | None = None,
    site: str | None = None,
) -> DataPolicyPair:
    """Apply a registered command to policy-checked inputs.

    Every input policy is derived by ``cmd`` first; if any becomes Zero the
    hook is not run and ``PolicyViolation`` is raised.
    """
    spec = registry[cmd.name]
    _check_shape(spec, len(inputs), site)
    parts = _derive_parts(inputs, cmd)
    ctx = ctx or RuntimeContext()
    value = registry.run_hook(cmd.name, [d._value for d in inputs], cmd.args, ctx)
    prov = tuple(x for d in inputs for x in d.provenance) + ((cmd.name, ctx.round_index),)
    return DataPolicyPair(value, parts, prov)


def can_return(dpp: DataPolicyPair) -> bool:
    """True iff ``return`` now leads to an empty-trace-accepting policy."""
    return all(emptiness(derive(p, RETURN)) for p in dpp.parts.values())


def release(dpp: DataPolicyPair, registry: CommandRegistry, ctx: RuntimeContext | None = None):
    """Return the payload if the policy allows it; raise otherwise."""
    for origin, p in dpp.parts.items():
        if not emptiness(derive(p, RETURN)):
            raise PolicyViolation(RETURN, p, origin)
    return registry.run_hook("return", [dpp._value], {}, ctx or RuntimeContext()) if "return" in registry else dpp._value


def _obligation_invocation(part: Policy, name: str, given: Mapping) -> CommandInvocation | None:
    """The invocation of ``name`` that ``part`` accepts next, or None.

    Parameters the program did not give are taken from the policy's pattern,
    so a bare ``enforce_dp_budget`` resolves to each group's own budget.
    """
    for pat in command_patterns(part):
        if pat.name != name:
            continue
        inv = CommandInvocation(name, {**pat.param_dict(), **given})
        if derive(part, inv) != ZERO:
            return inv
    return None


def discharge_obligations(
    dpp: DataPolicyPair,
    registry: CommandRegistry,
    ctx: RuntimeContext | None = None,
    given: Mapping[str, Mapping] | None = None,
) -> DataPolicyPair:
    """Run every obligation command the parts are waiting on, per origin.

    Each check runs with ``ctx.origin`` set to the part's origin. A failing
    check raises from its hook and nothing is released. Parts that do not
    ask for an obligation are left alone.
    """
    ctx = ctx or RuntimeContext()
    given = given or {}
    parts = dict(dpp.parts)
    prov = list(dpp.provenance)
    progress = True
    while progress:
        progress = False
        for origin in sorted(parts):
            p = parts[origin]
            if emptiness(derive(p, RETURN)):
                continue
            for name in registry.obligations():
                inv = _obligation_invocation(p, name, given.get(name, {}))
                if inv is None:
                    continue
                registry.run_hook(name, [dpp._value], inv.args, ctx.with_(origin=origin))
                parts[origin] = derive(p, inv)
                prov.append((name, ctx.round_index))
                progress = True
                break
    return DataPolicyPair(dpp._value, parts, tuple(prov))


# ---------------------------------------------------------------------------
# programs


@dataclass(frozen=True)
class Step:
    cmd: str
    args: Mapping[str, Any]
    inputs: tuple[str, ...]
    out: str

    def invocation(self) -> CommandInvocation:
        return CommandInvocation(self.cmd, dict(self.args))


def _freeze_args(args: Mapping) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in args.items()}


@dataclass(frozen=True)
class RestrictedProgram:
    """Single-assignment plan over registry commands."""

    role: str
    steps: tuple[Step, ...] = ()

    def __post_init__(self):
        if self.role not in ("local", "global"):
            raise ValueError("role must be 'local' or 'global'")

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "steps": [
                {
                    "cmd": s.cmd,
                    "args": {k: list(v) if isinstance(v, tuple) else v for k, v in s.args.items()},
                    "in": list(s.inputs),
                    "out": s.out,
                }
                for s in self.steps
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, obj: Mapping) -> "RestrictedProgram":
        try:
            steps = tuple(
                Step(s["cmd"], _freeze_args(s.get("args", {})), tuple(s.get("in", ())), s["out"])
                for s in obj.get("steps", ())
            )
            return cls(obj["role"], steps)
        except (KeyError, TypeError, AttributeError) as e:
            raise ValueError(f"malformed program: {e}") from None

    @classmethod
    def loads(cls, text: str) -> "RestrictedProgram":
        return cls.from_json(json.loads(text))


def validate_program(prog: RestrictedProgram, initial: Sequence[str], registry: CommandRegistry) -> None:
    """Static checks: known commands, right site and arity, single assignment."""
    defined = set(initial)
    for s in prog.steps:
        spec = registry[s.cmd]
        _check_shape(spec, len(s.inputs), prog.role)
        for name in s.inputs:
            if name not in defined:
                raise MissingSlot(f"step {s.cmd!r} reads undefined slot {name!r}")
        if s.out in defined:
            raise SlotReuse(f"slot {s.out!r} assigned twice")
        defined.add(s.out)


def check_program(
    prog: RestrictedProgram, slots: Mapping[str, DataPolicyPair], registry: CommandRegistry
) -> dict[str, dict[str, Policy]]:
    """Policy-only dry run. Returns the parts each slot would end with.

    Raises the same errors ``run_program`` would, without running any hook.
    """
    validate_program(prog, list(slots), registry)
    state = {k: DataPolicyPair(None, v.parts) for k, v in slots.items()}
    for s in prog.steps:
        parts = _derive_parts([state[i] for i in s.inputs], s.invocation())
        state[s.out] = DataPolicyPair(None, parts)
    return {k: dict(v.parts) for k, v in state.items()}


def run_program(
    prog: RestrictedProgram,
    slots: Mapping[str, DataPolicyPair],
    registry: CommandRegistry,
    ctx: RuntimeContext | None = None,
) -> dict[str, DataPolicyPair]:
    """Validate, dry-run, then execute; returns the slots the program assigned.

    Because the dry run covers the whole plan, a program that would violate
    a policy at step k runs no hooks at all.
    """
    check_program(prog, slots, registry)
    state = dict(slots)
    outputs = {}
    for s in prog.steps:
        outputs[s.out] = state[s.out] = invoke([state[i] for i in s.inputs], s.invocation(), registry, ctx, prog.role)
    return outputs


def final_slot(prog: RestrictedProgram, default: str) -> str:
    return prog.steps[-1].out if prog.steps else default
