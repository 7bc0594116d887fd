"""Per-pixel class-probability sources: SFPM files and a synthetic noisy oracle.

SFPM layout (little-endian): b"SFPM", u32 version (1), u32 width, u32 height,
u32 classes, then width*height*classes float32 values, pixel-major in
row-major order with the classes of one pixel contiguous.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ClassOutOfRange,
    DataError,
    RowNotNormalised,
    TrailingBytes,
    TruncatedFile,
)
from .label_fusion import nearest_source_index
from .semantics_core import _count, normalize_rows

logger = logging.getLogger(__name__)

MAGIC = b"SFPM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
VOID = 255


@dataclass(eq=False)
class ProbabilityMap:
    probs: np.ndarray  # (height, width, classes)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError("probability map must be (height, width, classes)")

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def classes(self) -> int:
        return self.probs.shape[2]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=2)


@dataclass
class ConfusionModel:
    """Row-stochastic confusion matrix driving the synthetic oracle.

    ``mode`` is "soft" (the row is the confusion row itself) or "sampled"
    (one class is drawn from the row and emitted as a one-hot smoothed by
    ``smoothing`` toward uniform).
    """

    matrix: np.ndarray
    sharpness: float = 0.0
    seed: int = 0
    mode: str = "soft"
    smoothing: float = 0.05

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")
        if self.sharpness < 0:
            raise ValueError("sharpness must be >= 0")
        if self.mode not in ("soft", "sampled"):
            raise ValueError(f"unknown oracle mode {self.mode!r}")

    @property
    def classes(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def symmetric(cls, classes: int, diag: float, **kw) -> "ConfusionModel":
        if classes == 1:
            return cls(np.ones((1, 1)), **kw)
        off = (1.0 - diag) / (classes - 1)
        m = np.full((classes, classes), off)
        np.fill_diagonal(m, diag)
        return cls(m, **kw)


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_uniforms(seed: int, stream: int, counters: np.ndarray, draws: int) -> np.ndarray:
    """Counter-based uniforms in [0, 1): shape (len(counters), draws).

    Each value depends only on (seed, stream, counter, draw index), so the
    result is independent of evaluation order.
    """
    with np.errstate(over="ignore"):
        key = _splitmix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        key = _splitmix(key ^ np.uint64(stream & 0xFFFFFFFFFFFFFFFF))
        base = _splitmix(key ^ np.asarray(counters, dtype=np.uint64))
        j = np.arange(draws, dtype=np.uint64) * np.uint64(0xD1B54A32D192ED03)
        bits = _splitmix(base[:, None] ^ j[None, :])
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def synthetic_oracle(gt_labels: np.ndarray, model: ConfusionModel, frame: int = 0) -> ProbabilityMap:
    """Noisy per-pixel predictions derived from a ground-truth label image.

    ``frame`` selects an independent random stream so successive frames see
    independent noise; pixels labelled 255 (void) get uniform rows.
    """
    gt = np.asarray(gt_labels)
    h, w = gt.shape
    n_cls = model.classes
    flat = gt.reshape(-1).astype(np.int64)
    void = flat == VOID
    bad = (~void) & ((flat < 0) | (flat >= n_cls))
    if bad.any():
        raise ClassOutOfRange(f"label {int(flat[bad][0])} outside 0..{n_cls - 1}")
    t = np.where(void, 0, flat)

    need_sample = model.mode == "sampled"
    draws = (1 if need_sample else 0) + (n_cls if model.sharpness > 0 else 0)
    u = counter_uniforms(model.seed, frame, np.arange(flat.size), draws) if draws else None

    if need_sample:
        cdf = np.cumsum(model.matrix, axis=1)
        cdf[:, -1] = 1.0
        c = (u[:, :1] >= cdf[t]).sum(axis=1)
        c = np.minimum(c, n_cls - 1)
        eps = model.smoothing
        rows = np.full((flat.size, n_cls), eps / n_cls)
        rows[np.arange(flat.size), c] += 1.0 - eps
    else:
        rows = model.matrix[t].copy()

    if model.sharpness > 0:
        jitter = -np.log1p(-u[:, -n_cls:])
        rows = normalize_rows(rows + model.sharpness * jitter, floor=0.0)
    rows[void] = 1.0 / n_cls
    return ProbabilityMap(rows.reshape(h, w, n_cls))


def rescale_probability_map(pm: ProbabilityMap, new_width: int, new_height: int) -> ProbabilityMap:
    """Nearest-neighbour resampling of whole probability rows."""
    if new_width < 1 or new_height < 1:
        raise ValueError("target dimensions must be >= 1")
    if (new_width, new_height) == (pm.width, pm.height):
        return ProbabilityMap(pm.probs.copy())
    su = nearest_source_index(pm.width, new_width)
    sv = nearest_source_index(pm.height, new_height)
    return ProbabilityMap(pm.probs[sv[:, None], su[None, :]])


def write_probability_map(pm: ProbabilityMap, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, pm.width, pm.height, pm.classes)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(pm.probs, dtype="<f4").tobytes())


def load_probability_map(path) -> ProbabilityMap:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, w, h, c = _HEADER.unpack_from(data)
    if version != VERSION:
        raise DataError(f"{path}: unsupported SFPM version {version}")
    if w < 1 or h < 1 or c < 1:
        raise DataError(f"{path}: empty dimensions {w}x{h}x{c}")
    n = w * h * c * 4
    body = data[_HEADER.size:]
    if len(body) < n:
        raise TruncatedFile(f"{path}: expected {n} payload bytes, found {len(body)}")
    if len(body) > n:
        raise TrailingBytes(f"{path}: {len(body) - n} unexpected trailing bytes")
    probs = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise RowNotNormalised(f"{path}: negative or non-finite probabilities")
    sums = probs.sum(axis=2)
    off = np.abs(sums - 1.0)
    if np.any(off > 0.01):
        v, u = np.argwhere(off > 0.01)[0]
        raise RowNotNormalised(f"{path}: pixel ({u}, {v}) sums to {sums[v, u]:.6f}")
    loose = off > 1e-3
    if loose.any():
        _count("renormalised_rows", int(loose.sum()))
        logger.warning("%s: renormalised %d probability rows", path, int(loose.sum()))
    drift = off > 1e-6
    if drift.any():
        probs[drift] /= sums[drift][:, None]
    return ProbabilityMap(probs)
