"""Per-group privacy accounting for the Poisson-subsampled Gaussian mechanism.

RDP of one round is computed from the log-moment ``log A_alpha`` (exact series
for integer orders, the two-sided erfc series for fractional orders), composed
additively across rounds and converted to (epsilon, delta).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "DEFAULT_ORDERS",
    "DEFAULT_DELTA",
    "RoundCharge",
    "BudgetCheck",
    "BudgetExceeded",
    "UnknownGroup",
    "PrivacyLedger",
    "rdp_subsampled_gaussian",
    "epsilon_from_rdp",
    "enforce_dp_budget",
]

DEFAULT_ORDERS: tuple[float, ...] = (
    (1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0, 3.5, 4.0, 4.5)
    + tuple(float(a) for a in range(5, 65))
    + (128.0, 256.0, 512.0)
)
DEFAULT_DELTA = 1e-8


class BudgetExceeded(RuntimeError):
    def __init__(self, group: str, spent: float, max_eps: float):
        super().__init__(f"group {group!r} spent epsilon {spent:.4f} > budget {max_eps}")
        self.group = group
        self.spent = spent
        self.max_eps = max_eps


class UnknownGroup(KeyError):
    pass


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_a_int(q: float, z: float, alpha: int) -> float:
    log_q, log_1mq = math.log(q), math.log1p(-q)
    i = np.arange(alpha + 1, dtype=float)
    terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(i + 1)
        - special.gammaln(alpha - i + 1)
        + i * log_q
        + (alpha - i) * log_1mq
        + (i * i - i) / (2 * z * z)
    )
    return float(special.logsumexp(terms))


def _log_erfc(x: float) -> float:
    return float(special.log_ndtr(-x * math.sqrt(2)) + math.log(2))


def _log_a_frac(q: float, z: float, alpha: float) -> float:
    # Split the integral at z0 where the two mixture components cross and
    # expand each half as a generalized binomial series.
    log_a0 = log_a1 = -math.inf
    z0 = z * z * math.log(1 / q - 1) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    prev0 = prev1 = -math.inf
    for i in range(100000):
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * log_q + j * log_1mq
        log_t1 = log_coef + j * log_q + i * log_1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * z))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * z))
        log_s0 = log_t0 + (i * i - i) / (2 * z * z) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * z * z) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        total = _log_add(log_a0, log_a1)
        if i > alpha and log_s0 < prev0 and log_s1 < prev1 and max(log_s0, log_s1) < total - 30:
            return total
        prev0, prev1 = log_s0, log_s1
    raise ArithmeticError("log-moment series did not converge")


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if a <= b:
        # Terms past the leading ones are tiny; clamp instead of going negative.
        return -math.inf if a == b else a
    return a + math.log1p(-math.exp(b - a))


@lru_cache(maxsize=65536)
def _rdp_one(q: float, z: float, alpha: float) -> float:
    if q == 1.0:
        return alpha / (2 * z * z)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, z, int(alpha))
    else:
        log_a = _log_a_frac(q, z, float(alpha))
    return log_a / (alpha - 1)


def rdp_subsampled_gaussian(
    q: float, z: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS
) -> np.ndarray:
    """RDP of ``steps`` rounds of the Poisson-subsampled Gaussian at each order."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    if not z > 0:
        raise ValueError(f"noise multiplier must be positive, got {z}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if any(a <= 1 for a in orders):
        raise ValueError("orders must be > 1")
    return np.array([steps * _rdp_one(float(q), float(z), float(a)) for a in orders])


def epsilon_from_rdp(rdp: Sequence[float], orders: Sequence[float], delta: float) -> tuple[float, float]:
    """Return ``(epsilon, best_order)`` minimizing rdp(a) + log(1/delta)/(a-1)."""
    if len(orders) == 0:
        raise ValueError("no orders given")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    orders_arr = np.asarray(orders, dtype=float)
    eps = np.asarray(rdp, dtype=float) + math.log(1 / delta) / (orders_arr - 1)
    k = int(np.nanargmin(eps))
    return float(eps[k]), float(orders_arr[k])


@dataclass
class RoundCharge:
    q: float
    z: float
    count: int = 1


@dataclass(frozen=True)
class BudgetCheck:
    passed: bool
    spent: float
    max_eps: float

    def __bool__(self):
        return self.passed


@dataclass
class PrivacyLedger:
    """Append-only per-group record of DP rounds.

    A charge with ``z == 0`` records a non-private round; any such round makes
    the group's spent epsilon infinite.
    """

    target_delta: float = DEFAULT_DELTA
    orders: tuple[float, ...] = DEFAULT_ORDERS
    charges: dict[str, list[RoundCharge]] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def register(self, group: str) -> None:
        self.charges.setdefault(group, [])

    def groups(self) -> list[str]:
        return list(self.charges)

    def charge_round(self, group: str, q: float, z: float, round_index: int | None = None) -> "PrivacyLedger":
        if not 0 < q <= 1:
            raise ValueError(f"sampling rate must be in (0, 1], got {q}")
        if z < 0:
            raise ValueError("noise multiplier must be non-negative")
        entries = self.charges.setdefault(group, [])
        for entry in entries:
            if entry.q == q and entry.z == z:
                entry.count += 1
                break
        else:
            entries.append(RoundCharge(q, z, 1))
        idx = round_index if round_index is not None else len(self.records)
        self.records.append({"group": group, "q": q, "z": z, "round_index": idx})
        return self

    def rounds(self, group: str) -> int:
        return sum(c.count for c in self.charges.get(group, ()))

    def rdp(self, group: str) -> np.ndarray:
        total = np.zeros(len(self.orders))
        # sorted so the float sum does not depend on charge order
        for c in sorted(self.charges.get(group, ()), key=lambda c: (c.q, c.z)):
            if c.z == 0:
                return np.full(len(self.orders), math.inf)
            total = total + rdp_subsampled_gaussian(c.q, c.z, c.count, self.orders)
        return total

    def spent(self, group: str, delta: float | None = None) -> tuple[float, float | None]:
        """``(epsilon, best_order)``; an uncharged group reports ``(0.0, None)``."""
        if group not in self.charges:
            raise UnknownGroup(group)
        if not self.charges[group]:
            return 0.0, None
        rdp = self.rdp(group)
        if np.isinf(rdp).all():
            return math.inf, None
        return epsilon_from_rdp(rdp, self.orders, delta or self.target_delta)

    def epsilon(self, group: str, delta: float | None = None) -> float:
        return self.spent(group, delta)[0]

    def report(self, delta: float | None = None) -> list[dict]:
        """One record per group; a non-private group reports ``epsilon: None``."""
        out = []
        for g in self.groups():
            eps, order = self.spent(g, delta)
            out.append({"group": g, "epsilon": eps if math.isfinite(eps) else None,
                        "delta": delta or self.target_delta, "best_order": order})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, lines: Iterable[str], **kwargs) -> "PrivacyLedger":
        ledger = cls(**kwargs)
        for line in lines:
            line = line.strip()
            if line:
                r = json.loads(line)
                ledger.charge_round(r["group"], r["q"], r["z"], r.get("round_index"))
        return ledger


def enforce_dp_budget(ledger: PrivacyLedger, group: str, max_eps: float, delta: float | None = None) -> BudgetCheck:
    spent, _ = ledger.spent(group, delta)
    return BudgetCheck(spent <= max_eps, spent, max_eps)
