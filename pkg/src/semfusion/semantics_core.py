"""Class vocabularies and floored discrete label distributions."""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

# Floor applied after normalisation; keeps a single bad prediction from
# vetoing a class forever under repeated multiplication.
PROB_FLOOR = 1e-12
# Below this every weight counts as zero and the result falls back to uniform.
ZERO_EPS = 1e-300

_diag_lock = threading.Lock()
diagnostics: Counter = Counter()


def _count(event: str, n: int = 1) -> None:
    if n:
        with _diag_lock:
            diagnostics[event] += n


@dataclass(frozen=True)
class LabelSet:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("label set needs at least one class")
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_file(cls, path) -> "LabelSet":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(line.strip() for line in text.splitlines() if line.strip()))

    @classmethod
    def nyu13(cls) -> "LabelSet":
        text = resources.files("semfusion").joinpath("data/nyu13.txt").read_text("utf-8")
        return cls(tuple(line.strip() for line in text.splitlines() if line.strip()))


@dataclass(frozen=True)
class LabelDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    __hash__ = None


def uniform(label_set: LabelSet | int) -> LabelDistribution:
    n = label_set if isinstance(label_set, int) else label_set.count
    if n < 1:
        raise ValueError("label count must be >= 1")
    return LabelDistribution(np.full(n, 1.0 / n))


def normalize_rows(weights: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Normalise each row of a (N, L) weight matrix into a floored distribution.

    Entries that would fall below ``floor`` are set to exactly ``floor`` and
    the remaining mass is rescaled so rows still sum to one. Rows whose
    weights are all below ``ZERO_EPS`` become uniform and are counted in
    ``diagnostics["all_zero"]``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("expected a 2-D array")
    n_rows, n_cls = w.shape
    out = np.empty_like(w)
    if n_rows == 0:
        return out

    dead = np.all(w < ZERO_EPS, axis=1)
    total = w.sum(axis=1)
    total[dead] = 1.0
    out[:] = w / total[:, None]
    out[dead] = 1.0 / n_cls
    _count("all_zero", int(dead.sum()))

    if floor > 0 and n_cls > 1:
        low = out < floor
        rows = np.flatnonzero(low.any(axis=1))
        if rows.size:
            sub = out[rows]
            sub_low = low[rows]
            keep_mass = np.where(sub_low, 0.0, sub).sum(axis=1)
            target = 1.0 - floor * sub_low.sum(axis=1)
            scale = target / keep_mass
            sub = np.where(sub_low, floor, sub * scale[:, None])
            out[rows] = sub
    return out


def normalize(weights) -> LabelDistribution:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    return LabelDistribution(normalize_rows(w[None, :])[0])


def argmax_label(dist: LabelDistribution | np.ndarray) -> tuple[int, float]:
    """Most probable class; ties go to the lowest index."""
    p = dist.probs if isinstance(dist, LabelDistribution) else np.asarray(dist)
    i = int(np.argmax(p))
    return i, float(p[i])
