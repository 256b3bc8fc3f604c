"""Models, local training, clipping, noising and federated averaging.

Models are small analytic-gradient tasks over flat float64 parameter vectors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

__all__ = [
    "ModelParams",
    "ShapeMismatch",
    "TrainingDiverged",
    "TrainConfig",
    "DpConfig",
    "DifferentiableTask",
    "QuadraticTask",
    "LogisticRegression",
    "SoftmaxRegression",
    "MLPClassifier",
    "make_task",
    "train_local",
    "clip_update",
    "train_local_dp",
    "gaussian_noise",
    "accumulate",
    "average",
]

_MODEL_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    """Loss or gradient went non-finite; lower the learning rate."""


class ModelParams:
    """Named parameter tensors stored as one flat float64 vector."""

    __slots__ = ("entries", "flat")

    def __init__(self, entries: Sequence[tuple[str, tuple[int, ...]]], flat):
        self.entries = tuple((str(n), tuple(int(d) for d in s)) for n, s in entries)
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        flat = np.array(flat, dtype=np.float64).reshape(-1)
        if flat.size != sum(math.prod(s) for _, s in self.entries):
            raise ValueError("flat vector does not match entry shapes")
        if flat.size == 0:
            raise ValueError("model has no parameters")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self.flat = flat

    @classmethod
    def zeros(cls, entries) -> "ModelParams":
        n = sum(math.prod(s) for _, s in entries)
        return cls(entries, np.zeros(n))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.entries, np.zeros_like(self.flat))

    def with_flat(self, flat) -> "ModelParams":
        return ModelParams(self.entries, flat)

    def copy(self) -> "ModelParams":
        return ModelParams(self.entries, self.flat.copy())

    def conformable(self, other: "ModelParams") -> bool:
        return self.entries == other.entries

    def check_conformable(self, other: "ModelParams") -> None:
        if not self.conformable(other):
            raise ShapeMismatch(f"{self.entries} vs {other.entries}")

    def __getitem__(self, name: str) -> np.ndarray:
        offset = 0
        for n, shape in self.entries:
            size = math.prod(shape)
            if n == name:
                return self.flat[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def __len__(self):
        return self.flat.size

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.entries == other.entries
            and self.flat.tobytes() == other.flat.tobytes()
        )

    def __repr__(self):
        return f"ModelParams({list(self.entries)}, n={self.flat.size})"

    # Binary layout (little-endian):
    #   u16 version | u32 entry count
    #   per entry: u16 name length | utf-8 name | u8 ndim | u32 dims... | f64 payload
    def to_bytes(self) -> bytes:
        out = [struct.pack("<HI", _MODEL_VERSION, len(self.entries))]
        offset = 0
        for name, shape in self.entries:
            raw = name.encode("utf-8")
            size = math.prod(shape)
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
            out.append(self.flat[offset : offset + size].astype("<f8").tobytes())
            offset += size
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        try:
            version, count = struct.unpack_from("<HI", data, 0)
            if version != _MODEL_VERSION:
                raise ValueError(f"unsupported model encoding version {version}")
            pos, entries, chunks = 6, [], []
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos : pos + nlen].decode("utf-8")
                pos += nlen
                (ndim,) = struct.unpack_from("<B", data, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
                size = math.prod(shape)
                if pos + 8 * size > len(data):
                    raise ValueError("truncated model payload")
                chunks.append(np.frombuffer(data, dtype="<f8", count=size, offset=pos))
                pos += 8 * size
                entries.append((name, shape))
        except struct.error as exc:
            raise ValueError(f"malformed model encoding: {exc}") from None
        if pos != len(data):
            raise ValueError("trailing bytes after model payload")
        return cls(entries, np.concatenate(chunks).astype(np.float64))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    local_lr: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.local_lr < 0:
            raise ValueError("local_lr must be non-negative")


@dataclass(frozen=True)
class DpConfig:
    """Clipping bound S, noise std sigma on the round sum, round size m.

    ``noise_multiplier`` is what the accountant is charged with; when unset it
    is sigma / S (noise std in units of one participant's sensitivity).
    """

    clip_bound: float
    noise_sigma: float
    round_size: int
    placement: str = "local"
    noise_multiplier: float | None = None

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.round_size < 1:
            raise ValueError("round_size must be >= 1")
        if self.placement not in ("local", "server"):
            raise ValueError("placement must be 'local' or 'server'")

    def to_dict(self) -> dict:
        """JSON-safe form; an unbounded clip is written as ``None``."""
        return {
            "clip_bound": None if math.isinf(self.clip_bound) else self.clip_bound,
            "noise_sigma": self.noise_sigma,
            "round_size": self.round_size,
            "placement": self.placement,
            "noise_multiplier": self.noise_multiplier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DpConfig":
        d = dict(d)
        if d.get("clip_bound") is None:
            d["clip_bound"] = math.inf
        return cls(**d)

    @property
    def accounting_multiplier(self) -> float:
        if self.noise_multiplier is not None:
            return self.noise_multiplier
        if math.isinf(self.clip_bound):
            return 0.0
        return self.noise_sigma / self.clip_bound


class DifferentiableTask(Protocol):
    def init_params(self, seed: int = 0) -> ModelParams: ...

    def loss(self, params: ModelParams, X: np.ndarray, y: np.ndarray) -> float: ...

    def gradient(self, params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def spec(self) -> dict: ...


class QuadraticTask:
    """loss = 0.5 * ||w||^2, independent of the batch."""

    def __init__(self, dim: int):
        self.dim = dim

    def init_params(self, seed=0):
        return ModelParams([("w", (self.dim,))], np.random.default_rng(seed).normal(size=self.dim))

    def loss(self, params, X, y):
        return 0.5 * float(params.flat @ params.flat)

    def gradient(self, params, X, y):
        return params.flat.copy()

    def predict(self, params, X):
        return np.zeros(len(X), dtype=int)

    def spec(self):
        return {"kind": "quadratic", "dim": self.dim}


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class LogisticRegression:
    def __init__(self, n_features: int, l2: float = 0.0):
        self.n_features = n_features
        self.l2 = l2

    def init_params(self, seed=0):
        return ModelParams.zeros([("w", (self.n_features,)), ("b", (1,))])

    def _logits(self, params, X):
        return X @ params["w"] + params["b"][0]

    def loss(self, params, X, y):
        z = self._logits(params, X)
        # mean binary cross-entropy, y in {0, 1}
        per = np.logaddexp(0.0, z) - y * z
        return float(per.mean() + 0.5 * self.l2 * params["w"] @ params["w"])

    def gradient(self, params, X, y):
        z = self._logits(params, X)
        r = (1.0 / (1.0 + np.exp(-z)) - y) / len(y)
        gw = X.T @ r + self.l2 * params["w"]
        return np.concatenate([gw, [r.sum()]])

    def predict_proba(self, params, X):
        return 1.0 / (1.0 + np.exp(-self._logits(params, X)))

    def predict(self, params, X):
        return (self._logits(params, X) > 0).astype(int)

    def spec(self):
        return {"kind": "logistic", "n_features": self.n_features, "l2": self.l2}


class SoftmaxRegression:
    def __init__(self, n_features: int, n_classes: int):
        self.n_features = n_features
        self.n_classes = n_classes

    def init_params(self, seed=0):
        return ModelParams.zeros([("W", (self.n_features, self.n_classes)), ("b", (self.n_classes,))])

    def _logits(self, params, X):
        return X @ params["W"] + params["b"]

    def loss(self, params, X, y):
        lp = _log_softmax(self._logits(params, X))
        return float(-lp[np.arange(len(y)), y.astype(int)].mean())

    def gradient(self, params, X, y):
        p = np.exp(_log_softmax(self._logits(params, X)))
        p[np.arange(len(y)), y.astype(int)] -= 1.0
        p /= len(y)
        return np.concatenate([(X.T @ p).ravel(), p.sum(axis=0)])

    def predict_proba(self, params, X):
        return np.exp(_log_softmax(self._logits(params, X)))

    def predict(self, params, X):
        return self._logits(params, X).argmax(axis=1)

    def spec(self):
        return {"kind": "softmax", "n_features": self.n_features, "n_classes": self.n_classes}


class MLPClassifier:
    """One tanh hidden layer followed by a softmax output."""

    def __init__(self, n_features: int, hidden: int, n_classes: int):
        self.n_features = n_features
        self.hidden = hidden
        self.n_classes = n_classes

    def _entries(self):
        return [
            ("W1", (self.n_features, self.hidden)),
            ("b1", (self.hidden,)),
            ("W2", (self.hidden, self.n_classes)),
            ("b2", (self.n_classes,)),
        ]

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        w1 = rng.normal(scale=1 / math.sqrt(self.n_features), size=(self.n_features, self.hidden))
        w2 = rng.normal(scale=1 / math.sqrt(self.hidden), size=(self.hidden, self.n_classes))
        flat = np.concatenate([w1.ravel(), np.zeros(self.hidden), w2.ravel(), np.zeros(self.n_classes)])
        return ModelParams(self._entries(), flat)

    def _forward(self, params, X):
        h = np.tanh(X @ params["W1"] + params["b1"])
        return h, h @ params["W2"] + params["b2"]

    def loss(self, params, X, y):
        _, z = self._forward(params, X)
        lp = _log_softmax(z)
        return float(-lp[np.arange(len(y)), y.astype(int)].mean())

    def gradient(self, params, X, y):
        h, z = self._forward(params, X)
        p = np.exp(_log_softmax(z))
        p[np.arange(len(y)), y.astype(int)] -= 1.0
        p /= len(y)
        gW2 = h.T @ p
        gb2 = p.sum(axis=0)
        dh = (p @ params["W2"].T) * (1 - h * h)
        gW1 = X.T @ dh
        gb1 = dh.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def predict_proba(self, params, X):
        return np.exp(_log_softmax(self._forward(params, X)[1]))

    def predict(self, params, X):
        return self._forward(params, X)[1].argmax(axis=1)

    def spec(self):
        return {"kind": "mlp", "n_features": self.n_features, "hidden": self.hidden, "n_classes": self.n_classes}


def make_task(spec: dict):
    kind = spec["kind"]
    if kind == "quadratic":
        return QuadraticTask(spec["dim"])
    if kind == "logistic":
        return LogisticRegression(spec["n_features"], spec.get("l2", 0.0))
    if kind == "softmax":
        return SoftmaxRegression(spec["n_features"], spec["n_classes"])
    if kind == "mlp":
        return MLPClassifier(spec["n_features"], spec["hidden"], spec["n_classes"])
    raise ValueError(f"unknown task kind {kind!r}")


def train_local(global_: ModelParams, data, cfg: TrainConfig, task) -> ModelParams:
    """E epochs of mini-batch SGD starting from the global model."""
    X, y = data
    n = len(y)
    if n == 0:
        raise ValueError("empty local dataset")
    w = global_.flat.copy()
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            # bypass validation in the inner loop
            params = ModelParams.__new__(ModelParams)
            params.entries, params.flat = global_.entries, w
            g = task.gradient(params, X[idx], y[idx])
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged("non-finite gradient")
            with np.errstate(over="ignore", invalid="ignore"):
                w = w - cfg.local_lr * g
            if not np.all(np.isfinite(w)):
                raise TrainingDiverged("non-finite parameters")
    return ModelParams(global_.entries, w)


def clip_update(delta: np.ndarray, S: float) -> np.ndarray:
    """Scale ``delta`` by 1/max(1, ||delta||/S)."""
    if not S > 0:
        raise ValueError("clip bound must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(delta))
    if norm <= S:
        return delta.copy()
    return delta / (norm / S)


def gaussian_noise(std: float, size: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, std, size=size)


def train_local_dp(global_: ModelParams, data, cfg: TrainConfig, dp: DpConfig, task, rng_seed) -> ModelParams:
    """Clipped update plus this participant's share of the round noise.

    Each of the m participants adds N(0, sigma^2/m) so the round sum carries
    N(0, sigma^2). With server placement no noise is added here.
    """
    local = train_local(global_, data, cfg, task)
    update = clip_update(local.flat - global_.flat, dp.clip_bound)
    if dp.placement == "local" and dp.noise_sigma > 0:
        update = update + gaussian_noise(dp.noise_sigma / math.sqrt(dp.round_size), update.size, rng_seed)
    return ModelParams(global_.entries, update)


def accumulate(partial: ModelParams, update: ModelParams) -> ModelParams:
    partial.check_conformable(update)
    return ModelParams(partial.entries, partial.flat + update.flat)


def average(global_: ModelParams, sum_of_updates: ModelParams, eta: float, n: int) -> ModelParams:
    """G + (eta / n) * sum of updates."""
    global_.check_conformable(sum_of_updates)
    if n < 1:
        raise ValueError("n must be >= 1")
    return ModelParams(global_.entries, global_.flat + (eta / n) * sum_of_updates.flat)
