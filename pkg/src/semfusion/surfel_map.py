"""Global surfel map: storage, frame integration, visibility and export.

Surfel attributes are kept as parallel numpy arrays ordered by id, and the
label distributions live in a separate :class:`ProbabilityTable` keyed by
the same ids. Every mutating operation keeps both id sets identical.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import IoFailure, ResolutionMismatch, SemFusionError
from .label_fusion import init_distributions
from .semantics_core import LabelDistribution, LabelSet

logger = logging.getLogger(__name__)

EMPTY = -1


@dataclass
class MapParams:
    depth_max: float = 8.0
    depth_eps: float = 0.05
    normal_eps_deg: float = 20.0
    stable_conf: float = 3.0
    probation: int = 30


@dataclass(frozen=True, eq=False)
class Surfel:
    id: int
    position: np.ndarray
    normal: np.ndarray
    colour: np.ndarray
    radius: float
    confidence: float
    created_at: int
    last_seen: int


@dataclass
class IntegrationStats:
    created: int = 0
    fused: int = 0
    skipped_missing_depth: int = 0
    skipped_out_of_range: int = 0


@dataclass
class IndexMap:
    """Per-pixel winning surfel id (``EMPTY`` where none) and its camera depth."""

    ids: np.ndarray
    depth: np.ndarray

    @property
    def shape(self):
        return self.ids.shape

    def occupied(self) -> np.ndarray:
        return self.ids != EMPTY


class ProbabilityTable:
    """Id-keyed store of per-surfel label distributions.

    Ids are kept sorted so lookups are a binary search.
    """

    def __init__(self, label_count: int):
        self.label_count = label_count
        self.ids = np.empty(0, dtype=np.int64)
        self.probs = np.empty((0, label_count))

    def __len__(self):
        return self.ids.size

    def __contains__(self, sid) -> bool:
        i = np.searchsorted(self.ids, sid)
        return bool(i < self.ids.size and self.ids[i] == sid)

    def keys(self) -> np.ndarray:
        return self.ids.copy()

    def rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        r = np.searchsorted(self.ids, ids)
        r_safe = np.minimum(r, max(self.ids.size - 1, 0))
        if self.ids.size == 0 or np.any(self.ids[r_safe] != ids):
            raise KeyError("unknown surfel id in probability table lookup")
        return r

    def get(self, sid: int) -> LabelDistribution:
        return LabelDistribution(self.probs[self.rows([sid])[0]])

    def append(self, ids: np.ndarray, probs: np.ndarray) -> None:
        if ids.size and self.ids.size and ids[0] <= self.ids[-1]:
            raise ValueError("ids must be appended in increasing order")
        self.ids = np.concatenate([self.ids, ids])
        self.probs = np.concatenate([self.probs, probs])

    def keep(self, mask: np.ndarray) -> None:
        self.ids = self.ids[mask]
        self.probs = self.probs[mask]


class SurfelMap:
    def __init__(self, label_set: LabelSet, params: MapParams | None = None):
        self.label_set = label_set
        self.params = params or MapParams()
        self.ids = np.empty(0, dtype=np.int64)
        self.position = np.empty((0, 3))
        self.normal = np.empty((0, 3))
        self.colour = np.empty((0, 3))
        self.radius = np.empty(0)
        self.confidence = np.empty(0)
        self.created_at = np.empty(0, dtype=np.int64)
        self.last_seen = np.empty(0, dtype=np.int64)
        self.table = ProbabilityTable(label_set.count)
        self.next_id = 0
        self.frame_counter = 0

    _FIELDS = ("ids", "position", "normal", "colour", "radius", "confidence", "created_at", "last_seen")

    def __len__(self):
        return self.ids.size

    def __contains__(self, sid) -> bool:
        i = np.searchsorted(self.ids, sid)
        return bool(i < self.ids.size and self.ids[i] == sid)

    @property
    def probability_table(self) -> ProbabilityTable:
        return self.table

    def rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        r = np.searchsorted(self.ids, ids)
        r_safe = np.minimum(r, max(self.ids.size - 1, 0))
        if self.ids.size == 0 or np.any(self.ids[r_safe] != ids):
            raise KeyError("unknown surfel id")
        return r

    def surfel(self, sid: int) -> Surfel:
        i = self.rows([sid])[0]
        return Surfel(
            int(self.ids[i]),
            self.position[i].copy(),
            self.normal[i].copy(),
            self.colour[i].copy(),
            float(self.radius[i]),
            float(self.confidence[i]),
            int(self.created_at[i]),
            int(self.last_seen[i]),
        )

    def distribution(self, sid: int) -> LabelDistribution:
        return self.table.get(sid)

    def distributions(self) -> np.ndarray:
        """Label distributions aligned with the surfel arrays (requires sync)."""
        self.check_integrity()
        return self.table.probs

    def add_surfels(self, position, normal, colour, radius, frame: int, probs=None) -> np.ndarray:
        n = len(position)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        self.position = np.concatenate([self.position, np.asarray(position, float).reshape(n, 3)])
        self.normal = np.concatenate([self.normal, np.asarray(normal, float).reshape(n, 3)])
        self.colour = np.concatenate([self.colour, np.asarray(colour, float).reshape(n, 3)])
        self.radius = np.concatenate([self.radius, np.broadcast_to(np.asarray(radius, float), (n,))])
        self.confidence = np.concatenate([self.confidence, np.ones(n)])
        self.created_at = np.concatenate([self.created_at, np.full(n, frame, dtype=np.int64)])
        self.last_seen = np.concatenate([self.last_seen, np.full(n, frame, dtype=np.int64)])
        if probs is None:
            probs = init_distributions(n, self.label_set.count)
        self.table.append(new_ids, np.asarray(probs, dtype=np.float64).reshape(n, self.label_set.count))
        return new_ids

    def remove_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        drop = np.isin(self.ids, ids)
        removed = self.ids[drop].copy()
        self._keep(~drop)
        return removed

    def _keep(self, keep: np.ndarray) -> None:
        removed = self.ids[~keep]
        for name in self._FIELDS:
            setattr(self, name, getattr(self, name)[keep])
        tkeep = ~np.isin(self.table.ids, removed)
        self.table.keep(tkeep)

    def check_integrity(self) -> None:
        if not np.array_equal(self.ids, self.table.ids):
            raise SemFusionError(
                f"probability table out of sync with surfel store "
                f"({self.ids.size} surfels, {self.table.ids.size} table entries)"
            )

    def snapshot(self) -> "SurfelMap":
        return copy.deepcopy(self)


def _camera_normals(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Surface normals from a back-projected depth image, facing the camera.

    Central differences inside the image, one-sided on the border. Pixels
    whose required neighbours lack depth use the negated viewing ray.
    """
    h, w, _ = points.shape

    def diffs(axis):
        n = points.shape[axis]
        d = np.zeros_like(points)
        ok = np.zeros(valid.shape, dtype=bool)
        if n < 2:
            return d, ok
        sl = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(2))
        # interior
        d[sl(1, n - 1)] = points[sl(2, n)] - points[sl(0, n - 2)]
        ok[sl(1, n - 1)] = valid[sl(2, n)] & valid[sl(0, n - 2)]
        # borders
        d[sl(0, 1)] = points[sl(1, 2)] - points[sl(0, 1)]
        ok[sl(0, 1)] = valid[sl(1, 2)]
        d[sl(n - 1, n)] = points[sl(n - 1, n)] - points[sl(n - 2, n - 1)]
        ok[sl(n - 1, n)] = valid[sl(n - 2, n - 1)]
        return d, ok

    du, ok_u = diffs(1)
    dv, ok_v = diffs(0)
    n = np.cross(dv, du)
    norm = np.linalg.norm(n, axis=-1)
    good = valid & ok_u & ok_v & (norm > 1e-12)
    n = np.where(good[..., None], n / np.where(norm > 0, norm, 1.0)[..., None], 0.0)

    ray_len = np.linalg.norm(points, axis=-1)
    fallback = -points / np.where(ray_len > 0, ray_len, 1.0)[..., None]
    n = np.where(good[..., None], n, fallback)
    flip = np.sum(n * points, axis=-1) > 0
    n[flip] *= -1
    return n


def visible_set(
    smap: SurfelMap,
    pose: geo.Pose,
    intr: geo.Intrinsics,
    resolution: tuple[int, int] | None = None,
    depth_max: float | None = None,
) -> IndexMap:
    """Z-buffered projection of every surfel into the view of ``pose``."""
    if resolution is not None and tuple(resolution) != intr.resolution:
        intr = intr.scaled(*resolution)
    w, h = intr.width, intr.height
    depth_max = smap.params.depth_max if depth_max is None else depth_max
    ids = np.full((h, w), EMPTY, dtype=np.int64)
    zbuf = np.full((h, w), np.inf)
    if len(smap) == 0:
        return IndexMap(ids, zbuf)

    pc = geo.transform(geo.invert(pose), smap.position)
    u, v, z, front = geo.project_points(intr, pc)
    iu, iv = geo.to_pixel_index(u, v)
    ok = front & (z <= depth_max) & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    sel = np.flatnonzero(ok)
    lin = iv[sel] * w + iu[sel]
    # sort by pixel, then depth, then id; the first entry per pixel wins
    order = np.lexsort((smap.ids[sel], z[sel], lin))
    lin_s = lin[order]
    first = np.ones(lin_s.size, dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win = sel[order[first]]
    flat_ids = ids.reshape(-1)
    flat_z = zbuf.reshape(-1)
    flat_ids[lin_s[first]] = smap.ids[win]
    flat_z[lin_s[first]] = z[win]
    return IndexMap(ids, zbuf)


def integrate_frame(
    smap: SurfelMap,
    rgb: np.ndarray,
    depth: np.ndarray,
    pose: geo.Pose,
    intr: geo.Intrinsics,
    params: MapParams | None = None,
    frame: int | None = None,
) -> IntegrationStats:
    """Fuse one RGB-D frame into the map.

    Each pixel with depth in (0, depth_max] either updates the surfel that
    wins its z-buffer (when depth and normal agree) or spawns a new surfel
    with a uniform label distribution.
    """
    params = params or smap.params
    h, w = depth.shape[:2]
    if (w, h) != intr.resolution or rgb.shape[:2] != depth.shape[:2]:
        raise ResolutionMismatch(
            f"rgb {rgb.shape[:2]} / depth {depth.shape[:2]} vs intrinsics {intr.height}x{intr.width}"
        )
    frame = smap.frame_counter if frame is None else frame
    stats = IntegrationStats()

    d = np.asarray(depth, dtype=np.float64)
    finite = np.isfinite(d)
    missing = ~finite | (d <= 0)
    far = finite & (d > params.depth_max)
    valid = ~missing & ~far
    stats.skipped_missing_depth = int(missing.sum())
    stats.skipped_out_of_range = int(far.sum())

    idx = visible_set(smap, pose, intr, depth_max=params.depth_max)

    pts_cam = geo.back_project_image(intr, np.where(valid, d, 0.0))
    nrm_cam = _camera_normals(pts_cam, valid)

    pix = np.flatnonzero(valid.reshape(-1))
    cand_ids = idx.ids.reshape(-1)[pix]
    has = cand_ids != EMPTY

    p_world = geo.transform(pose, pts_cam.reshape(-1, 3)[pix])
    n_world = nrm_cam.reshape(-1, 3)[pix] @ pose.rotation.T
    col = rgb.reshape(-1, rgb.shape[2] if rgb.ndim == 3 else 1)[pix].astype(np.float64)
    if col.shape[1] == 1:
        col = np.repeat(col, 3, axis=1)
    radius = d.reshape(-1)[pix] * np.sqrt(2.0) / intr.fx

    fuse = np.zeros(pix.size, dtype=bool)
    if has.any():
        hp = np.flatnonzero(has)
        rows = smap.rows(cand_ids[hp])
        dz = np.abs(idx.depth.reshape(-1)[pix[hp]] - d.reshape(-1)[pix[hp]])
        cos_gate = np.cos(np.deg2rad(params.normal_eps_deg))
        agree_n = np.einsum("ij,ij->i", smap.normal[rows], n_world[hp]) >= cos_gate
        ok = (dz <= params.depth_eps) & agree_n
        fuse[hp[ok]] = True
        rows = rows[ok]
        src = hp[ok]

        c = smap.confidence[rows][:, None]
        smap.position[rows] = (c * smap.position[rows] + p_world[src]) / (c + 1)
        smap.colour[rows] = (c * smap.colour[rows] + col[src]) / (c + 1)
        nn = c * smap.normal[rows] + n_world[src]
        smap.normal[rows] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
        smap.radius[rows] = (c[:, 0] * smap.radius[rows] + radius[src]) / (c[:, 0] + 1)
        smap.confidence[rows] += 1
        smap.last_seen[rows] = frame
        stats.fused = int(ok.sum())

    new = ~fuse
    smap.add_surfels(p_world[new], n_world[new], col[new], radius[new], frame)
    stats.created = int(new.sum())
    smap.frame_counter = frame + 1
    return stats


def remove_unstable(smap: SurfelMap, current_frame: int, params: MapParams | None = None) -> np.ndarray:
    """Delete low-confidence surfels that outlived their probation period.

    Removal purges the surfel store and the probability table together.
    """
    params = params or smap.params
    drop = (smap.confidence < params.stable_conf) & (current_frame - smap.created_at > params.probation)
    removed = smap.ids[drop].copy()
    if removed.size:
        smap._keep(~drop)
    return removed


def load_palette(path=None) -> np.ndarray:
    if path is None:
        text = resources.files("semfusion").joinpath("data/palette.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    entries = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 4:
            entries[int(parts[0])] = [int(p) for p in parts[1:]]
    size = max(entries) + 1 if entries else 0
    pal = np.zeros((size, 3), dtype=np.uint8)
    for k, rgb in entries.items():
        pal[k] = rgb
    return pal


PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("nx", "<f4"),
        ("ny", "<f4"),
        ("nz", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("label", "<u2"),
        ("label_confidence", "<f4"),
    ]
)
_PLY_TYPES = {"<f4": "float", "u1": "uchar", "<u2": "ushort"}
_PLY_TYPES_REV = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


def map_vertices(smap: SurfelMap, mode: str = "colour", palette: np.ndarray | None = None) -> np.ndarray:
    """Structured vertex array as written by :func:`export_ply`."""
    probs = smap.distributions()
    labels = np.argmax(probs, axis=1)
    verts = np.zeros(len(smap), dtype=PLY_DTYPE)
    verts["x"], verts["y"], verts["z"] = smap.position.T
    verts["nx"], verts["ny"], verts["nz"] = smap.normal.T
    if mode == "label":
        pal = load_palette() if palette is None else np.asarray(palette, dtype=np.uint8)
        rgb = pal[labels % len(pal)]
    elif mode == "colour":
        rgb = np.clip(np.rint(smap.colour), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown export mode {mode!r}")
    verts["red"], verts["green"], verts["blue"] = rgb.T
    verts["label"] = labels
    verts["label_confidence"] = probs[np.arange(len(smap)), labels]
    return verts


def export_ply(smap: SurfelMap, path, mode: str = "colour", binary: bool = True, palette=None) -> None:
    if len(smap) == 0:
        raise ValueError("cannot export an empty map")
    verts = map_vertices(smap, mode, palette)
    fmt = "binary_little_endian" if binary else "ascii"
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {len(verts)}"]
    for name in PLY_DTYPE.names:
        lines.append(f"property {_PLY_TYPES[PLY_DTYPE[name].str.replace('|', '')]} {name}")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            if binary:
                f.write(verts.tobytes())
            else:
                floats = [PLY_DTYPE[n].kind == "f" for n in PLY_DTYPE.names]
                for row in verts.tolist():
                    cells = (f"{v:.9g}" if fl else str(v) for v, fl in zip(row, floats))
                    f.write((" ".join(cells) + "\n").encode("ascii"))
    except OSError as e:
        raise IoFailure(str(e)) from e


def read_ply(path) -> np.ndarray:
    """Read the vertex element of an ascii or binary little-endian PLY."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise IoFailure(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt, count, props, in_vertex = None, 0, [], False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append((parts[2], _PLY_TYPES_REV[parts[1]]))
    dtype = np.dtype(props)
    if fmt == "binary_little_endian":
        if len(body) < count * dtype.itemsize:
            raise IoFailure(f"{path}: truncated vertex data")
        return np.frombuffer(body, dtype=dtype, count=count).copy()
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:count]
        out = np.zeros(count, dtype=dtype)
        for i, row in enumerate(rows):
            out[i] = tuple(float(x) for x in row.split())
        return out
    raise IoFailure(f"{path}: unsupported PLY format {fmt}")
