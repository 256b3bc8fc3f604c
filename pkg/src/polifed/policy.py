"""Use-based privacy policies as regular expressions over commands.

Policies are immutable ASTs. A policy is advanced one command at a time by
the derivative ``derive`` and is satisfied (may be released) when it accepts
the empty trace. All constructors in this module go through the smart
constructors ``seq``/``union``/``inter``/``neg``/``star``, which apply the
reduction rules, so every policy built here is already reduced.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence, Union as TUnion

__all__ = [
    "PolicySyntaxError",
    "UnknownMacro",
    "CommandPattern",
    "CommandInvocation",
    "Policy",
    "Zero",
    "One",
    "Cmd",
    "Seq",
    "Union",
    "Intersect",
    "Neg",
    "Star",
    "ZERO",
    "ONE",
    "TOP",
    "seq",
    "union",
    "inter",
    "neg",
    "star",
    "parse_policy",
    "to_text",
    "emptiness",
    "derive",
    "matches_command",
    "reduce",
    "expand_macros",
    "accepts_trace",
    "node_count",
    "command_patterns",
    "invocation",
    "DEFAULT_MACROS",
]

Literal = TUnion[str, int, float, bool]
ParamValue = TUnion[Literal, tuple]

_IDENT = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*\Z")


class PolicySyntaxError(ValueError):
    """Raised for malformed policy text; ``offset`` is a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class UnknownMacro(KeyError):
    pass


# ---------------------------------------------------------------------------
# Commands


@dataclass(frozen=True)
class CommandPattern:
    name: str
    params: tuple[tuple[str, ParamValue], ...] = ()

    def __post_init__(self):
        if not _IDENT.match(self.name):
            raise ValueError(f"invalid command name {self.name!r}")
        keys = [k for k, _ in self.params]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate parameter in {self.name}")

    def param_dict(self) -> dict[str, ParamValue]:
        return dict(self.params)


@dataclass(frozen=True)
class CommandInvocation:
    name: str
    args: Mapping[str, object] = field(default_factory=dict)

    def __hash__(self):
        return hash(self.name)

    def __str__(self):
        if not self.args:
            return self.name
        inner = ", ".join(f"{k}={_lit_text(_freeze(v))}" for k, v in self.args.items())
        return f"{self.name}({inner})"


def invocation(name: str, **args) -> CommandInvocation:
    return CommandInvocation(name, dict(args))


def _freeze(value):
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _lit_eq(a, b) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, str) != isinstance(b, str):
        return False
    return a == b


def _value_eq(pattern_value, actual) -> bool:
    if isinstance(pattern_value, tuple):
        if not isinstance(actual, (list, tuple, set, frozenset)):
            return False
        actual = list(actual)
        # lists compare as sets
        return all(any(_lit_eq(p, a) for a in actual) for p in pattern_value) and all(
            any(_lit_eq(p, a) for p in pattern_value) for a in actual
        )
    if isinstance(actual, (list, tuple, set, frozenset)):
        return False
    return _lit_eq(pattern_value, actual)


def matches_command(pat: CommandPattern, inv: CommandInvocation) -> bool:
    """Names equal and every constraint of ``pat`` holds in ``inv.args``.

    Arguments not mentioned by the pattern are unconstrained.
    """
    if pat.name != inv.name:
        return False
    for key, value in pat.params:
        if key not in inv.args or not _value_eq(value, inv.args[key]):
            return False
    return True


# ---------------------------------------------------------------------------
# AST


class Policy:
    __slots__ = ()

    @cached_property
    def text(self) -> str:
        return to_text(self)

    @cached_property
    def size(self) -> int:
        return 1 + sum(c.size for c in self.children())

    @cached_property
    def nullable(self) -> bool:
        return _nullable(self)

    def children(self) -> tuple["Policy", ...]:
        return ()

    def __str__(self):
        return self.text


@dataclass(frozen=True, eq=True, repr=False)
class Zero(Policy):
    def __hash__(self):
        return 0x5A

    def __repr__(self):
        return "Zero()"


@dataclass(frozen=True, eq=True, repr=False)
class One(Policy):
    def __hash__(self):
        return 0x1E

    def __repr__(self):
        return "One()"


@dataclass(frozen=True, eq=True)
class Cmd(Policy):
    pattern: CommandPattern

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self):
        return hash(("Cmd", self.pattern))


class _Binary(Policy):
    def children(self):
        return (self.left, self.right)

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self):
        return hash((type(self).__name__, self.left, self.right))


@dataclass(frozen=True, eq=True)
class Seq(_Binary):
    left: Policy
    right: Policy
    __hash__ = _Binary.__hash__


@dataclass(frozen=True, eq=True)
class Union(_Binary):
    left: Policy
    right: Policy
    __hash__ = _Binary.__hash__


@dataclass(frozen=True, eq=True)
class Intersect(_Binary):
    left: Policy
    right: Policy
    __hash__ = _Binary.__hash__


class _Unary(Policy):
    def children(self):
        return (self.body,)

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self):
        return hash((type(self).__name__, self.body))


@dataclass(frozen=True, eq=True)
class Neg(_Unary):
    body: Policy
    __hash__ = _Unary.__hash__


@dataclass(frozen=True, eq=True)
class Star(_Unary):
    body: Policy
    __hash__ = _Unary.__hash__


ZERO = Zero()
ONE = One()
TOP = Neg(ZERO)  # accepts every trace


def node_count(p: Policy) -> int:
    return p.size


def _nullable(p: Policy) -> bool:
    if isinstance(p, (Zero, Cmd)):
        return False
    if isinstance(p, (One, Star)):
        return True
    if isinstance(p, (Seq, Intersect)):
        return p.left.nullable and p.right.nullable
    if isinstance(p, Union):
        return p.left.nullable or p.right.nullable
    if isinstance(p, Neg):
        return not p.body.nullable
    raise TypeError(p)


def emptiness(p: Policy) -> bool:
    """True iff ``p`` accepts the empty trace."""
    return p.nullable


# ---------------------------------------------------------------------------
# Smart constructors (reduction rules)


def _sort_key(p: Policy):
    return p.text


def _flatten(kind, parts: Iterable[Policy], out: list):
    for p in parts:
        if isinstance(p, kind):
            _flatten(kind, (p.left, p.right), out)
        else:
            out.append(p)


def seq(left: Policy, right: Policy) -> Policy:
    if left == ZERO or right == ZERO:
        return ZERO
    if left == ONE:
        return right
    if right == ONE:
        return left
    if isinstance(right, Seq):
        # canonical left association, matching the parser
        return seq(seq(left, right.left), right.right)
    return Seq(left, right)


def _fold(kind, items: list[Policy]) -> Policy:
    result = items[-1]
    for p in reversed(items[:-1]):
        result = kind(p, result)
    return result


def union(*parts: Policy) -> Policy:
    flat: list[Policy] = []
    _flatten(Union, parts, flat)
    uniq = {p for p in flat if p != ZERO}
    if TOP in uniq:
        return TOP
    if not uniq:
        return ZERO
    return _fold(Union, sorted(uniq, key=_sort_key))


def inter(*parts: Policy) -> Policy:
    flat: list[Policy] = []
    _flatten(Intersect, parts, flat)
    uniq = set(flat)
    if ZERO in uniq:
        return ZERO
    uniq.discard(TOP)
    if not uniq:
        return TOP
    return _fold(Intersect, sorted(uniq, key=_sort_key))


def neg(body: Policy) -> Policy:
    if isinstance(body, Neg):
        return body.body
    return Neg(body)


def star(body: Policy) -> Policy:
    if isinstance(body, Star):
        return body
    if body == ZERO or body == ONE:
        return ONE
    return Star(body)


def reduce(p: Policy) -> Policy:
    """Rebuild ``p`` bottom-up through the reducing constructors."""
    if isinstance(p, (Zero, One, Cmd)):
        return p
    if isinstance(p, Seq):
        return seq(reduce(p.left), reduce(p.right))
    if isinstance(p, Union):
        return union(reduce(p.left), reduce(p.right))
    if isinstance(p, Intersect):
        return inter(reduce(p.left), reduce(p.right))
    if isinstance(p, Neg):
        return neg(reduce(p.body))
    if isinstance(p, Star):
        return star(reduce(p.body))
    raise TypeError(p)


# ---------------------------------------------------------------------------
# Derivative


def _derive(p: Policy, c: CommandInvocation, memo: dict) -> Policy:
    key = id(p)
    hit = memo.get(key)
    if hit is not None:
        return hit
    if isinstance(p, (Zero, One)):
        out = ZERO
    elif isinstance(p, Cmd):
        out = ONE if matches_command(p.pattern, c) else ZERO
    elif isinstance(p, Seq):
        head = seq(_derive(p.left, c, memo), p.right)
        out = union(head, _derive(p.right, c, memo)) if p.left.nullable else head
    elif isinstance(p, Union):
        out = union(_derive(p.left, c, memo), _derive(p.right, c, memo))
    elif isinstance(p, Intersect):
        out = inter(_derive(p.left, c, memo), _derive(p.right, c, memo))
    elif isinstance(p, Star):
        out = seq(_derive(p.body, c, memo), p)
    elif isinstance(p, Neg):
        out = neg(_derive(p.body, c, memo))
    else:
        raise TypeError(p)
    memo[key] = out
    return out


_DERIVE_CACHE: dict[tuple[Policy, str], Policy] = {}
_DERIVE_CACHE_MAX = 8192


def derive(p: Policy, c: CommandInvocation) -> Policy:
    """Residual policy after executing command ``c`` (already reduced)."""
    # keyed structurally: equal policies parsed from different messages share work;
    # the invocation's text keeps literal types apart (1, 1.0, true, '1')
    key = (p, str(c))
    hit = _DERIVE_CACHE.get(key)
    if hit is None:
        hit = _derive(p, c, {})
        if len(_DERIVE_CACHE) >= _DERIVE_CACHE_MAX:
            _DERIVE_CACHE.clear()
        _DERIVE_CACHE[key] = hit
    return hit


def accepts_trace(p: Policy, trace: Sequence[CommandInvocation]) -> bool:
    for c in trace:
        p = derive(p, c)
        if p == ZERO:
            return False
    return p.nullable


def command_patterns(p: Policy) -> list[CommandPattern]:
    """Distinct command patterns mentioned in ``p``, in first-seen order."""
    seen: dict[CommandPattern, None] = {}
    stack = [p]
    while stack:
        node = stack.pop()
        if isinstance(node, Cmd):
            seen.setdefault(node.pattern)
        stack.extend(reversed(node.children()))
    return list(seen)


# ---------------------------------------------------------------------------
# Text form

_PREC = {Union: 1, Intersect: 2, Seq: 3, Neg: 4, Star: 5}
_OPS = {Union: " + ", Intersect: " & ", Seq: " . "}


def _prec(p: Policy) -> int:
    return _PREC.get(type(p), 6)


def _lit_text(v) -> str:
    if isinstance(v, tuple):
        return "[" + ", ".join(_lit_text(x) for x in v) + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite literal")
        return repr(v)
    s = str(v).replace("\\", "\\\\").replace("'", "\\'").replace("\n", "\\n").replace("\t", "\\t")
    return f"'{s}'"


def _pattern_text(pat: CommandPattern) -> str:
    if not pat.params:
        return pat.name
    inner = ", ".join(f"{k}={_lit_text(v)}" for k, v in pat.params)
    return f"{pat.name}({inner})"


def to_text(p: Policy) -> str:
    """Canonical text; ``parse_policy(to_text(p)) == p``."""
    if isinstance(p, Zero):
        return "0"
    if isinstance(p, One):
        return "1"
    if isinstance(p, Cmd):
        return _pattern_text(p.pattern)
    if isinstance(p, (Seq, Union, Intersect)):
        prec = _PREC[type(p)]
        left = p.left.text
        right = p.right.text
        if _prec(p.left) < prec:
            left = f"({left})"
        if _prec(p.right) <= prec:
            right = f"({right})"
        return left + _OPS[type(p)] + right
    if isinstance(p, Neg):
        body = p.body.text
        return "!" + (body if _prec(p.body) >= 4 else f"({body})")
    if isinstance(p, Star):
        body = p.body.text
        return (body if _prec(p.body) >= 5 else f"({body})") + "*"
    raise TypeError(p)


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[a-zA-Z_][a-zA-Z0-9_]*)
  | (?P<str>["'])
  | (?P<sym>[.+&!*()\[\],=])
    """,
    re.VERBOSE,
)

_ESCAPES = {"\\": "\\", "'": "'", '"': '"', "n": "\n", "t": "\t"}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, object, int]] = []
        self._lex()
        self.i = 0

    def _offset(self, char_index: int) -> int:
        return len(self.text[:char_index].encode("utf-8"))

    def _err(self, msg: str, char_index: int):
        raise PolicySyntaxError(msg, self._offset(char_index))

    def _lex(self):
        text, pos = self.text, 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m:
                self._err(f"unexpected character {text[pos]!r}", pos)
            kind = m.lastgroup
            if kind == "ws":
                pos = m.end()
            elif kind == "str":
                quote, j, buf = m.group(), m.end(), []
                while True:
                    if j >= len(text):
                        self._err("unterminated string", pos)
                    ch = text[j]
                    if ch == quote:
                        break
                    if ch == "\\":
                        if j + 1 >= len(text):
                            self._err("unterminated string", pos)
                        esc = text[j + 1]
                        if esc not in _ESCAPES:
                            self._err(f"unknown escape \\{esc}", j)
                        buf.append(_ESCAPES[esc])
                        j += 2
                        continue
                    buf.append(ch)
                    j += 1
                self.tokens.append(("str", "".join(buf), pos))
                pos = j + 1
            else:
                self.tokens.append((kind, m.group(), pos))
                pos = m.end()
        self.tokens.append(("eof", None, len(text)))

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_sym(self, sym: str):
        kind, val, pos = self.take()
        if kind != "sym" or val != sym:
            if kind == "eof" and sym == ")":
                self._err("unbalanced parentheses", pos)
            self._err(f"expected {sym!r}", pos)

    def at_sym(self, sym: str) -> bool:
        kind, val, _ = self.peek()
        return kind == "sym" and val == sym

    def parse(self) -> Policy:
        p = self.union_expr()
        kind, val, pos = self.peek()
        if kind != "eof":
            if kind == "sym" and val == ")":
                self._err("unbalanced parentheses", pos)
            self._err(f"unexpected {val!r}", pos)
        return p

    def union_expr(self):
        p = self.inter_expr()
        while self.at_sym("+"):
            self.take()
            p = Union(p, self.inter_expr())
        return p

    def inter_expr(self):
        p = self.seq_expr()
        while self.at_sym("&"):
            self.take()
            p = Intersect(p, self.seq_expr())
        return p

    def seq_expr(self):
        p = self.unary()
        while self.at_sym("."):
            self.take()
            p = Seq(p, self.unary())
        return p

    def unary(self):
        if self.at_sym("!"):
            self.take()
            return Neg(self.unary())
        p = self.atom()
        while self.at_sym("*"):
            self.take()
            p = Star(p)
        return p

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num" and val in ("0", "1"):
            return ZERO if val == "0" else ONE
        if kind == "ident":
            params = ()
            if self.at_sym("("):
                self.take()
                params = self.params()
            try:
                return Cmd(CommandPattern(val, params))
            except ValueError as exc:
                self._err(str(exc), pos)
        if kind == "sym" and val == "(":
            p = self.union_expr()
            self.expect_sym(")")
            return p
        if kind == "eof":
            self._err("unexpected end of policy", pos)
        self._err(f"expected a policy, found {val!r}", pos)

    def params(self):
        out = []
        if self.at_sym(")"):
            self.take()
            return ()
        while True:
            kind, key, pos = self.take()
            if kind != "ident":
                self._err("expected parameter name", pos)
            if any(k == key for k, _ in out):
                self._err(f"duplicate parameter {key!r}", pos)
            self.expect_sym("=")
            out.append((key, self.value()))
            if self.at_sym(","):
                self.take()
                continue
            self.expect_sym(")")
            return tuple(out)

    def value(self):
        if self.at_sym("["):
            self.take()
            items = []
            if self.at_sym("]"):
                self.take()
                return ()
            while True:
                items.append(self.scalar())
                if self.at_sym(","):
                    self.take()
                    continue
                self.expect_sym("]")
                return tuple(items)
        return self.scalar()

    def scalar(self):
        kind, val, pos = self.take()
        if kind == "str":
            return val
        if kind == "num":
            if re.fullmatch(r"-?\d+", val):
                return int(val)
            return float(val)
        if kind == "ident":
            if val == "true":
                return True
            if val == "false":
                return False
            return val  # bare symbolic name, e.g. geofence=GF
        self._err("expected a literal value", pos)


def parse_policy(text: str) -> Policy:
    """Parse policy text into an AST (not reduced)."""
    if not text or not text.strip():
        raise PolicySyntaxError("empty policy", 0)
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Macros

DEFAULT_MACROS: dict[str, Policy] = {
    "runFL": parse_policy("train_local . accumulate* . (train_local . accumulate* + average*)*"),
}


def expand_macros(p: Policy, table: Mapping[str, Policy] | None = None) -> Policy:
    """Replace every command named after a macro with its template.

    Commands whose name looks like a macro call (``run*``) but is missing from
    the table raise ``UnknownMacro``.
    """
    table = DEFAULT_MACROS if table is None else table

    def walk(node: Policy) -> Policy:
        if isinstance(node, Cmd):
            name = node.pattern.name
            if name in table:
                return table[name]
            if name.startswith("run") and name[3:4].isupper():
                raise UnknownMacro(name)
            return node
        if isinstance(node, (Seq, Union, Intersect)):
            return type(node)(walk(node.left), walk(node.right))
        if isinstance(node, (Neg, Star)):
            return type(node)(walk(node.body))
        return node

    return walk(p)
