"""RGB-D sequence ingestion, TUM trajectories and a synthetic box-room renderer.

Sequence directory layout::

    seq/rgb/<timestamp>.png|ppm
    seq/depth/<timestamp>.png|pgm      16-bit, depth_scale units per metre
    seq/labels/<timestamp>.png|pgm     optional, class indices (255 = void)
    seq/trajectory.txt                 "timestamp tx ty tz qx qy qz qw"
    seq/intrinsics.txt                 key=value
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import geometry as geo
from .errors import (
    BadQuaternion,
    DegenerateSpec,
    MalformedLine,
    MissingPair,
    NonMonotonicTimestamps,
    UnreadableImage,
)
from .semantics_core import LabelSet

logger = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".pnm")


@dataclass(eq=False)
class FrameRecord:
    index: int
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) metres, 0 = missing
    gt_labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth sizes differ")
        if self.gt_labels is not None and self.gt_labels.shape != self.depth.shape:
            raise ValueError("label image size differs from depth")


@dataclass(eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.poses) != self.timestamps.size:
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("trajectory timestamps must strictly increase")

    def __len__(self):
        return self.timestamps.size


# --- netpbm -----------------------------------------------------------------


def _pnm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    (w, h, maxval), off = _pnm_tokens(data, 3)
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * ch
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
    arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)


def write_pnm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        magic, maxval = b"P6", 255
        body = arr.astype(np.uint8).tobytes()
    else:
        wide = arr.dtype.itemsize > 1
        magic, maxval = b"P5", 65535 if wide else 255
        body = arr.astype(">u2" if wide else "u1").tobytes()
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        f.write(body)


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
            return read_pnm(path)
        from PIL import Image

        with Image.open(path) as im:
            return np.array(im)
    except Exception as e:  # noqa: BLE001 - any decoder failure is a data error
        raise UnreadableImage(f"{path}: {e}") from e


def write_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        write_pnm(path, arr)
        return
    from PIL import Image

    arr = np.asarray(arr)
    # uint16 single-channel arrays map to 16-bit greyscale PNGs
    Image.fromarray(arr if arr.dtype == np.uint16 else arr.astype(np.uint8)).save(path)


# --- sequences --------------------------------------------------------------


def _stem_index(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS}


def _timestamp(stem: str) -> float:
    try:
        return float(stem)
    except ValueError:
        head = stem.split("_")[0]
        return float(head)


def load_sequence(seq_dir, depth_scale: float = 1000.0) -> Iterator[FrameRecord]:
    """Yield frames in timestamp order, depth converted to metres."""
    seq_dir = Path(seq_dir)
    rgb = _stem_index(seq_dir / "rgb")
    depth = _stem_index(seq_dir / "depth")
    labels = _stem_index(seq_dir / "labels")
    if not rgb:
        raise MissingPair(f"{seq_dir}: no images in rgb/")
    for stem in rgb:
        if stem not in depth:
            raise MissingPair(f"{rgb[stem]} has no matching depth image")
    try:
        stems = sorted(rgb, key=lambda s: (_timestamp(s), s))
    except ValueError as e:
        raise MissingPair(f"{seq_dir}: filenames must start with a timestamp ({e})") from None

    def frames():
        for i, stem in enumerate(stems):
            img = read_image(rgb[stem])
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            img = img[..., :3].astype(np.uint8)
            raw = read_image(depth[stem])
            if raw.ndim != 2:
                raise UnreadableImage(f"{depth[stem]}: depth must be single channel")
            d = raw.astype(np.float64) / depth_scale
            gt = read_image(labels[stem]).astype(np.int64) if stem in labels else None
            if gt is not None and gt.ndim != 2:
                raise UnreadableImage(f"{labels[stem]}: labels must be single channel")
            yield FrameRecord(i, _timestamp(stem), img, d, gt, stem)

    return frames()


def write_sequence(seq_dir, frames, traj: Trajectory | None, intr: geo.Intrinsics,
                   fmt: str = "png", depth_scale: float = 1000.0) -> None:
    seq_dir = Path(seq_dir)
    ext_rgb, ext_gray = (".png", ".png") if fmt == "png" else (".ppm", ".pgm")
    for sub in ("rgb", "depth", "labels"):
        (seq_dir / sub).mkdir(parents=True, exist_ok=True)
    for fr in frames:
        stem = f"{fr.timestamp:.6f}"
        write_image(seq_dir / "rgb" / (stem + ext_rgb), fr.rgb)
        raw = np.clip(np.rint(fr.depth * depth_scale), 0, 65535).astype(np.uint16)
        write_image(seq_dir / "depth" / (stem + ext_gray), raw)
        if fr.gt_labels is not None:
            write_image(seq_dir / "labels" / (stem + ext_gray), fr.gt_labels.astype(np.uint8))
    if traj is not None:
        write_trajectory(seq_dir / "trajectory.txt", traj)
    intr.to_file(seq_dir / "intrinsics.txt")


# --- trajectories -----------------------------------------------------------


def load_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise MalformedLine(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise MalformedLine(f"{path}:{lineno}: non-numeric field") from None
        t, tx, ty, tz, qx, qy, qz, qw = vals
        q = np.array([qx, qy, qz, qw])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise BadQuaternion(f"{path}:{lineno}: quaternion norm {norm:.6f}")
        if stamps and t <= stamps[-1]:
            raise NonMonotonicTimestamps(f"{path}:{lineno}: timestamp {t} not after {stamps[-1]}")
        stamps.append(t)
        poses.append(geo.Pose.from_quaternion(q / norm, [tx, ty, tz]))
    return Trajectory(np.array(stamps), poses)


def write_trajectory(path, traj: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in zip(traj.timestamps, traj.poses):
        q = geo.matrix_to_quaternion(pose.rotation)
        vals = [*pose.translation, *q]
        lines.append(f"{t:.6f} " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def associate_pose(traj: Trajectory, timestamp: float, tolerance: float = 0.02):
    """Nearest pose within ``tolerance`` seconds (earlier wins ties), else None."""
    if len(traj) == 0:
        return None
    ts = traj.timestamps
    i = int(np.searchsorted(ts, timestamp))
    best = None
    for j in (i - 1, i):
        if 0 <= j < ts.size:
            dt = abs(ts[j] - timestamp)
            if best is None or dt < best[0]:
                best = (dt, j)
    dt, j = best
    return traj.poses[j] if dt <= tolerance else None


# --- synthetic scenes -------------------------------------------------------

FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


def _face_axes(face: str):
    axis = "xyz".index(face[1])
    inplane = [a for a in range(3) if a != axis]
    return axis, face[0] == "+", inplane


@dataclass
class Patch:
    """Labelled rectangle on a box face.

    ``lo``/``hi`` bound the two in-plane world coordinates of the face in
    axis order (e.g. (y, z) for an x face).
    """

    label: int
    face: str
    lo: tuple[float, float]
    hi: tuple[float, float]
    colour: tuple[int, int, int]


@dataclass
class CameraPath:
    """Parametric camera motion.

    ``orbit``: circle of ``radius`` around ``centre`` at ``height``, looking
    inward at the centre raised to ``target_height`` (plus ``bob`` times
    sin(2*angle)); the angle starts at ``phase_deg`` and covers ``turns``
    revolutions over the sequence. ``sweep``: straight line ``start`` -> ``end`` looking
    along ``direction``.
    """

    kind: str = "orbit"
    centre: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    height: float = 1.4
    target_height: float = 1.4
    bob: float = 0.0
    turns: float = 1.0
    phase_deg: float = 0.0
    start: tuple[float, float, float] = (0.0, 0.0, 1.4)
    end: tuple[float, float, float] = (0.0, 0.0, 1.4)
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def pose(self, i: int, n: int) -> geo.Pose:
        if self.kind == "orbit":
            a = math.radians(self.phase_deg) + 2 * math.pi * self.turns * i / max(n, 1)
            cx, cy = self.centre
            pos = np.array([cx + self.radius * math.cos(a), cy + self.radius * math.sin(a), self.height])
            target = np.array([cx, cy, self.target_height + self.bob * math.sin(2 * a)])
            if self.radius == 0:
                target = pos + np.array([math.cos(a), math.sin(a), target[2] - self.height])
            return look_at(pos, target)
        if self.kind == "sweep":
            s = i / (n - 1) if n > 1 else 0.0
            pos = (1 - s) * np.asarray(self.start, float) + s * np.asarray(self.end, float)
            return look_at(pos, pos + np.asarray(self.direction, float))
        raise DegenerateSpec(f"unknown camera path {self.kind!r}")


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> geo.Pose:
    """Camera-to-world pose at ``position`` looking at ``target`` (world z up)."""
    pos = np.asarray(position, float)
    fwd = np.asarray(target, float) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return geo.Pose(np.column_stack([right, down, fwd]), pos)


@dataclass
class SceneSpec:
    box_min: tuple[float, float, float]
    box_max: tuple[float, float, float]
    face_labels: dict  # face -> class index
    face_colours: dict  # face -> rgb
    patches: list = field(default_factory=list)
    path: CameraPath = field(default_factory=CameraPath)
    fps: float = 30.0

    def validate(self, label_count: int | None = None) -> None:
        lo, hi = np.asarray(self.box_min, float), np.asarray(self.box_max, float)
        if np.any(hi <= lo):
            raise DegenerateSpec("box has zero or negative extent")
        for f in FACES:
            if f not in self.face_labels or f not in self.face_colours:
                raise DegenerateSpec(f"face {f} lacks a label or colour")
        for p in self.patches:
            if p.face not in FACES:
                raise DegenerateSpec(f"unknown face {p.face!r}")
            if p.hi[0] <= p.lo[0] or p.hi[1] <= p.lo[1]:
                raise DegenerateSpec(f"zero-area patch on {p.face}")
            _, _, inplane = _face_axes(p.face)
            for k, a in enumerate(inplane):
                if p.lo[k] < lo[a] or p.hi[k] > hi[a]:
                    raise DegenerateSpec(f"patch on {p.face} extends beyond the face")
        if label_count is not None:
            labels = list(self.face_labels.values()) + [p.label for p in self.patches]
            if any(not 0 <= l < label_count for l in labels):
                raise DegenerateSpec("scene uses a class index outside the label set")

    def classes_present(self) -> list[int]:
        return sorted(set(self.face_labels.values()) | {p.label for p in self.patches})

    def to_json(self) -> str:
        d = {
            "box_min": list(self.box_min),
            "box_max": list(self.box_max),
            "face_labels": self.face_labels,
            "face_colours": {k: list(v) for k, v in self.face_colours.items()},
            "patches": [vars(p) for p in self.patches],
            "path": vars(self.path),
            "fps": self.fps,
        }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(
            box_min=tuple(d["box_min"]),
            box_max=tuple(d["box_max"]),
            face_labels={k: int(v) for k, v in d["face_labels"].items()},
            face_colours={k: tuple(v) for k, v in d["face_colours"].items()},
            patches=[Patch(int(p["label"]), p["face"], tuple(p["lo"]), tuple(p["hi"]), tuple(p["colour"]))
                     for p in d.get("patches", [])],
            path=CameraPath(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("path", {}).items()}),
            fps=float(d.get("fps", 30.0)),
        )


def box_room(labels: LabelSet | None = None, path: CameraPath | None = None) -> SceneSpec:
    """Office-like room with nine classes: floor, ceiling, walls and six patches.

    The patches cluster around the -x wall so that a short pan toward it
    sees every class.
    """
    ls = labels or LabelSet.nyu13()
    c = ls.index
    wall = c("wall")
    return SceneSpec(
        box_min=(-3.0, -2.5, 0.0),
        box_max=(3.0, 2.5, 2.8),
        face_labels={"-x": wall, "+x": wall, "-y": wall, "+y": wall, "-z": c("floor"), "+z": c("ceiling")},
        face_colours={
            "-x": (200, 190, 170), "+x": (196, 186, 168), "-y": (204, 194, 174),
            "+y": (198, 188, 172), "-z": (150, 120, 90), "+z": (240, 240, 236),
        },
        patches=[
            Patch(c("window"), "-x", (-2.2, 0.9), (-1.0, 2.3), (120, 180, 230)),
            Patch(c("painting"), "-x", (-0.6, 1.3), (0.6, 2.1), (180, 40, 40)),
            Patch(c("books"), "-x", (-0.6, 0.2), (0.6, 1.1), (90, 60, 160)),
            Patch(c("tv"), "-x", (1.0, 0.8), (2.2, 1.6), (20, 20, 24)),
            Patch(c("bed"), "-z", (-2.9, -2.4), (-1.2, -0.9), (60, 140, 60)),
            Patch(c("table"), "-z", (-2.2, 0.5), (-0.9, 1.9), (160, 100, 40)),
        ],
        path=path or CameraPath(kind="orbit", centre=(0.5, 0.0), radius=1.0, height=1.6, target_height=1.5, bob=0.3),
    )


def pan_orbit(arc_deg: float = 36.0) -> CameraPath:
    """Short inward-looking orbit arc centred on the view of the -x wall."""
    return CameraPath(
        kind="orbit", centre=(0.5, 0.0), radius=1.0, height=1.6, target_height=1.5, bob=0.3,
        turns=arc_deg / 360.0, phase_deg=-arc_deg / 2,
    )


def render_view(spec: SceneSpec, intr: geo.Intrinsics, pose: geo.Pose):
    """Ray-cast one view from inside the box: (rgb, z-depth, labels, hit points)."""
    lo, hi = np.asarray(spec.box_min, float), np.asarray(spec.box_max, float)
    o = pose.translation
    if np.any(o <= lo) or np.any(o >= hi):
        raise DegenerateSpec("camera must lie strictly inside the box")
    rays = geo.pixel_rays(intr).reshape(-1, 3) @ pose.rotation.T  # z_cam == 1 scaling
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (hi[None, :] - o[None, :]) / rays
        t_lo = (lo[None, :] - o[None, :]) / rays
    t_axis = np.where(rays > 0, t_hi, np.where(rays < 0, t_lo, np.inf))
    axis = np.argmin(t_axis, axis=1)
    t = t_axis[np.arange(axis.size), axis]
    hit = o[None, :] + t[:, None] * rays
    positive = rays[np.arange(axis.size), axis] > 0

    n = axis.size
    labels = np.empty(n, dtype=np.int64)
    rgb = np.empty((n, 3), dtype=np.uint8)
    face_id = axis * 2 + positive
    for k, face in enumerate(FACES):
        m = face_id == k
        labels[m] = spec.face_labels[face]
        rgb[m] = spec.face_colours[face]
    for p in spec.patches:
        a, pos_side, inplane = _face_axes(p.face)
        on = face_id == (a * 2 + pos_side)
        u, v = hit[:, inplane[0]], hit[:, inplane[1]]
        m = on & (u >= p.lo[0]) & (u <= p.hi[0]) & (v >= p.lo[1]) & (v <= p.hi[1])
        labels[m] = p.label
        rgb[m] = p.colour
    h, w = intr.height, intr.width
    return rgb.reshape(h, w, 3), t.reshape(h, w), labels.reshape(h, w), hit.reshape(h, w, 3)


def render_scene(spec: SceneSpec, intr: geo.Intrinsics, n_frames: int):
    """Render ``n_frames`` along the scene's camera path; returns (frames, trajectory)."""
    if n_frames < 1:
        raise DegenerateSpec("need at least one frame")
    spec.validate()
    frames, poses, stamps = [], [], []
    for i in range(n_frames):
        pose = spec.path.pose(i, n_frames)
        rgb, depth, labels, _ = render_view(spec, intr, pose)
        ts = i / spec.fps
        frames.append(FrameRecord(i, ts, rgb, depth, labels, f"{ts:.6f}"))
        poses.append(pose)
        stamps.append(ts)
    return frames, Trajectory(np.array(stamps), poses)


def iter_render(spec: SceneSpec, intr: geo.Intrinsics, n_frames: int):
    """Lazy variant of :func:`render_scene` yielding (frame, pose)."""
    spec.validate()
    for i in range(n_frames):
        pose = spec.path.pose(i, n_frames)
        rgb, depth, labels, _ = render_view(spec, intr, pose)
        ts = i / spec.fps
        yield FrameRecord(i, ts, rgb, depth, labels, f"{ts:.6f}"), pose
