"""Synthetic per-user datasets, non-IID splits, column filters and geofences."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "TASK_KINDS",
    "UserDataset",
    "Geofence",
    "MissingLocation",
    "generate_task",
    "dirichlet_partition",
    "filter_columns",
    "in_geofence_cond",
    "haversine_m",
    "save_dataset",
    "load_dataset",
    "roc_auc",
    "accuracy",
    "pool",
]

TASK_KINDS = ("classification-2class", "multiclass-10", "sequence-next-token")

# stand-in for a campus; the behaviour task places users around it
CAMPUS = (52.2053, 0.1218)


class MissingLocation(ValueError):
    pass


@dataclass
class UserDataset:
    """Column table for one user.

    ``tags`` maps a column to the sensitive source it comes from ("mic",
    "loc"); ``location`` names the (lat, lon) columns when present.
    """

    user_id: int
    columns: dict[str, np.ndarray]
    label: str
    tags: dict[str, str] = field(default_factory=dict)
    location: tuple[str, str] | None = None
    data_type: str = "synthetic"

    def __post_init__(self):
        if self.label not in self.columns:
            raise ValueError(f"label column {self.label!r} missing")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) != 1:
            raise ValueError("columns have different lengths")

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.label])

    @property
    def feature_names(self) -> list[str]:
        """Model inputs: every column except the label and raw coordinates."""
        skip = {self.label, *(self.location or ())}
        return [c for c in self.columns if c not in skip]

    def features(self, feature_columns: Sequence[str] | None = None) -> np.ndarray:
        """Feature matrix in ``feature_columns`` order; absent columns read as 0."""
        names = self.feature_names if feature_columns is None else list(feature_columns)
        X = np.zeros((self.n_rows, len(names)))
        for j, c in enumerate(names):
            if c in self.columns:
                X[:, j] = self.columns[c]
        return X

    def labels(self) -> np.ndarray:
        return self.columns[self.label].astype(int)

    def take(self, rows) -> "UserDataset":
        return UserDataset(
            self.user_id,
            {k: v[rows] for k, v in self.columns.items()},
            self.label,
            dict(self.tags),
            self.location,
            self.data_type,
        )

    def equals(self, other: "UserDataset") -> bool:
        return (
            self.user_id == other.user_id
            and list(self.columns) == list(other.columns)
            and all(np.array_equal(self.columns[k], other.columns[k]) for k in self.columns)
            and self.label == other.label
            and self.tags == other.tags
            and self.location == other.location
            and self.data_type == other.data_type
        )


@dataclass(frozen=True)
class Geofence:
    lat: float
    lon: float
    radius_m: float

    def __post_init__(self):
        if not (math.isfinite(self.radius_m) and self.radius_m >= 0):
            raise ValueError("radius must be finite and non-negative")


def haversine_m(lat1, lon1, lat2, lon2):
    r = 6371008.8
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * r * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def dirichlet_partition(labels, n_clients: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Split each class across clients by a Dirichlet(alpha) draw.

    Every index lands in exactly one client; some clients may be empty.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    shares: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            shares[k].append(part)
    return [np.sort(np.concatenate(s)) if s else np.array([], dtype=int) for s in shares]


def _hypercube_means(n_classes: int, dim: int, scale: float) -> np.ndarray:
    corners = np.array([[1 if (i >> b) & 1 else -1 for b in range(dim)] for i in range(2**dim)], dtype=float)
    if n_classes > len(corners):
        raise ValueError("too many classes for the feature dimension")
    # spread the chosen corners: prefer ones far apart in Hamming distance
    order = sorted(range(len(corners)), key=lambda i: (bin(i).count("1") % 2, i))
    return scale * corners[order[:n_classes]]


def _classification_pool(n_rows: int, rng, n_classes: int, dim: int, scale: float):
    means = _hypercube_means(n_classes, dim, scale)
    y = rng.integers(0, n_classes, size=n_rows)
    X = means[y] + rng.normal(size=(n_rows, dim))
    return X, y


def _behaviour_user(uid: int, rows: int, rng, data_type: str, separation: float) -> UserDataset:
    # Per-class Gaussians. The generic features carry weaker signal than the
    # microphone level and the distance to campus, so dropping mic/loc costs
    # accuracy without making the task hopeless.
    sign = 2 * (rng.random(rows) < 0.5) - 1
    X = sign[:, None] * (separation / 2) + rng.normal(size=(rows, 4))
    mic = sign * separation + rng.normal(size=rows)
    dist_km = np.exp(-0.5 * sign * separation + 0.5 * rng.normal(size=rows))
    bearing = rng.uniform(0, 2 * np.pi, rows)
    lat = CAMPUS[0] + (1000 * dist_km * np.cos(bearing)) / 111_320.0
    lon = CAMPUS[1] + (1000 * dist_km * np.sin(bearing)) / (111_320.0 * math.cos(math.radians(CAMPUS[0])))
    cols = {f"f{j}": X[:, j] for j in range(4)}
    cols["mic_level"] = mic
    cols["dist_campus_km"] = dist_km
    cols["lat"] = lat
    cols["lon"] = lon
    cols["label"] = (sign > 0).astype(int)
    tags = {"mic_level": "mic", "dist_campus_km": "loc", "lat": "loc", "lon": "loc"}
    return UserDataset(uid, cols, "label", tags, ("lat", "lon"), data_type)


def _markov_source(rng, vocab: int):
    trans = rng.dirichlet(np.full(vocab, 0.2), size=vocab)
    return trans


def generate_task(
    kind: str,
    n_users: int,
    rows_per_user: int,
    seed: int,
    *,
    partition: str = "iid",
    alpha: float = 0.9,
    data_type: str | None = None,
    n_features: int = 4,
    separation: float | None = None,
    vocab: int = 8,
) -> list[UserDataset]:
    """Deterministic synthetic users for one of ``TASK_KINDS``.

    * ``classification-2class``: the behaviour-modelling stand-in. Two
      Gaussian classes whose means differ by ``separation`` per generic
      feature (4 of them), plus a "mic"-tagged level and "loc"-tagged
      distance-to-campus and lat/lon columns.
    * ``multiclass-10``: 10 Gaussian classes centred on hypercube corners
      ``separation`` apart; ``partition="dirichlet"`` gives a non-IID split.
    * ``sequence-next-token``: next token of an order-1 Markov source, with
      the previous token one-hot encoded.
    """
    if n_users < 1 or rows_per_user < 1:
        raise ValueError("n_users and rows_per_user must be >= 1")
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "classification-2class":
        dt = data_type or "MPU"
        sep = 0.6 if separation is None else separation
        return [
            _behaviour_user(u, rows_per_user, np.random.default_rng([seed, u]), dt, sep) for u in range(n_users)
        ]
    if kind == "multiclass-10":
        dt = data_type or "cifar"
        dim = max(n_features, 4)
        sep = 5.0 if separation is None else separation
        X, y = _classification_pool(n_users * rows_per_user, rng, 10, dim, sep / 2)
        if partition == "dirichlet":
            for attempt in range(100):
                parts = dirichlet_partition(y, n_users, alpha, seed + attempt)
                if all(len(p) for p in parts):
                    break
            else:
                raise RuntimeError("could not draw a partition without empty clients")
        else:
            parts = np.array_split(np.arange(len(y)), n_users)
        out = []
        for u, idx in enumerate(parts):
            cols = {f"f{j}": X[idx, j] for j in range(dim)}
            cols["label"] = y[idx]
            out.append(UserDataset(u, cols, "label", data_type=dt))
        return out
    dt = data_type or "reddit"
    trans = _markov_source(rng, vocab)
    out = []
    for u in range(n_users):
        urng = np.random.default_rng([seed, u])
        toks = np.empty(rows_per_user + 1, dtype=int)
        toks[0] = urng.integers(vocab)
        for t in range(1, rows_per_user + 1):
            toks[t] = urng.choice(vocab, p=trans[toks[t - 1]])
        onehot = np.eye(vocab)[toks[:-1]]
        cols = {f"prev_{v}": onehot[:, v] for v in range(vocab)}
        cols["label"] = toks[1:]
        out.append(UserDataset(u, cols, "label", data_type=dt))
    return out


def filter_columns(d: UserDataset, drop: Sequence[str]) -> UserDataset:
    """Drop every column tagged with one of ``drop``."""
    drop = set(drop)
    gone = {c for c, t in d.tags.items() if t in drop}
    if not gone:
        return d.take(slice(None))
    cols = {k: v.copy() for k, v in d.columns.items() if k not in gone}
    tags = {k: v for k, v in d.tags.items() if k not in gone}
    location = d.location if d.location and not (set(d.location) & gone) else None
    return UserDataset(d.user_id, cols, d.label, tags, location, d.data_type)


def in_geofence_cond(d: UserDataset, gf: Geofence) -> UserDataset:
    """Keep rows within ``gf.radius_m`` (great-circle) of the fence centre."""
    if d.location is None or any(c not in d.columns for c in d.location):
        raise MissingLocation(f"user {d.user_id} has no location column")
    lat, lon = (d.columns[c] for c in d.location)
    keep = haversine_m(gf.lat, gf.lon, lat, lon) <= gf.radius_m
    return d.take(np.flatnonzero(keep))


def pool(datasets: Sequence[UserDataset], feature_columns: Sequence[str]):
    X = np.concatenate([d.features(feature_columns) for d in datasets])
    y = np.concatenate([d.labels() for d in datasets])
    return X, y


def accuracy(y_true, y_pred) -> float:
    return float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))


def roc_auc(y_true, scores) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    from scipy.stats import rankdata

    y_true = np.asarray(y_true).astype(bool)
    n_pos, n_neg = y_true.sum(), (~y_true).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[y_true].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def save_dataset(d: UserDataset, path: str | Path) -> None:
    """Write ``path`` (CSV) and ``path.schema.json`` (columns, tags, label)."""
    path = Path(path)
    names = list(d.columns)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(d.n_rows):
            w.writerow([repr(float(d.columns[c][i])) if d.columns[c].dtype.kind == "f" else int(d.columns[c][i]) for c in names])
    schema = {
        "user_id": d.user_id,
        "columns": [{"name": c, "dtype": d.columns[c].dtype.kind} for c in names],
        "label": d.label,
        "tags": d.tags,
        "location": list(d.location) if d.location else None,
        "data_type": d.data_type,
    }
    Path(str(path) + ".schema.json").write_text(json.dumps(schema, indent=2, sort_keys=True))


def load_dataset(path: str | Path) -> UserDataset:
    path = Path(path)
    schema = json.loads(Path(str(path) + ".schema.json").read_text())
    kinds = {c["name"]: c["dtype"] for c in schema["columns"]}
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        dtype = float if kinds[name] == "f" else int
        cols[name] = np.array([dtype(r[j]) for r in body], dtype=dtype)
    loc = tuple(schema["location"]) if schema.get("location") else None
    return UserDataset(schema["user_id"], cols, schema["label"], schema["tags"], loc, schema["data_type"])
