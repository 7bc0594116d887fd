"""Frame loop, prediction/CRF scheduling, configuration and experiments.

Scheduling convention: frame k (1-based) triggers a prediction+fusion when
k % cnn_every == 0 and a CRF update when crf_every > 0 and k % crf_every == 0.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dense_crf
from . import geometry as geo
from .dataset_io import (
    SceneSpec,
    associate_pose,
    box_room,
    iter_render,
    load_sequence,
    load_trajectory,
    pan_orbit,
)
from .errors import ConfigError, DataError, SemFusionError
from .evaluation import ConfusionAccumulator, accumulate, downsample_nearest, project_map_labels
from .label_fusion import fuse_prediction
from .prediction import ConfusionModel, load_probability_map, synthetic_oracle
from .semantics_core import LabelSet
from .surfel_map import MapParams, SurfelMap, export_ply, integrate_frame, remove_unstable, visible_set

logger = logging.getLogger(__name__)

SCHEDULE_CONVENTION = "1-based frame index k; event fires when k % period == 0"
STAGES = ("integration", "table", "prediction", "fusion", "crf", "evaluation")


@dataclass
class PipelineConfig:
    cnn_every: int = 10
    crf_every: int = 500
    crf_iterations: int = 10
    depth_max: float = 8.0
    seed: int = 0
    # inputs
    sequence: str | None = None
    trajectory: str | None = None
    intrinsics: str | None = None
    scene: str | None = None  # "box-room", "box-room-pan" or a SceneSpec JSON file
    n_frames: int = 36
    render_res: tuple[int, int] = (320, 240)
    labels: str | None = None  # class-list file; NYUv2 13 classes by default
    depth_scale: float = 1000.0
    pose_tolerance: float = 0.02
    # predictions: a directory of <frame stem>.sfpm files, else the oracle
    predictions: str | None = None
    oracle_diag: float = 0.7
    oracle_mode: str = "sampled"
    oracle_sharpness: float = 0.0
    # evaluation
    eval_res: tuple[int, int] = (320, 240)
    eval_every: int = 1
    eval_mode: str = "immediate"  # or "final": score the finished map against every eval frame
    # outputs
    export_ply: str | None = None
    ply_mode: str = "label"
    metrics_out: str | None = None
    strict_sequential: bool = False
    debug_checks: bool = True
    map: MapParams = field(default_factory=MapParams)
    crf: dense_crf.CrfParams = field(default_factory=dense_crf.CrfParams)

    def validate(self) -> None:
        if self.cnn_every < 1:
            raise ConfigError("cnn_every must be >= 1")
        if self.crf_every < 0:
            raise ConfigError("crf_every must be >= 0")
        if self.sequence is None and self.scene is None:
            raise ConfigError("need --sequence (with a trajectory) or --scene")
        if self.oracle_mode not in ("soft", "sampled"):
            raise ConfigError(f"oracle_mode must be soft or sampled, not {self.oracle_mode!r}")
        if self.eval_mode not in ("immediate", "final"):
            raise ConfigError(f"eval_mode must be immediate or final, not {self.eval_mode!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def map_params(self) -> MapParams:
        return dataclasses.replace(self.map, depth_max=self.depth_max)

    def crf_params(self) -> dense_crf.CrfParams:
        return dataclasses.replace(self.crf, iterations=self.crf_iterations, seed=self.seed)


# --- config files -----------------------------------------------------------

_NESTED = {"map": MapParams, "crf": dense_crf.CrfParams}
# nested keys shadowed by top-level ones
_SHADOWED = {("map", "depth_max"), ("crf", "iterations"), ("crf", "seed")}


def _coerce(value: str, current):
    if isinstance(current, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        parts = value.lower().replace("x", " ").replace(",", " ").split()
        return tuple(int(p) for p in parts)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if value.strip().lower() in ("", "none"):
        return None
    return value


def config_keys() -> list[str]:
    keys = [f.name for f in dataclasses.fields(PipelineConfig) if f.name not in _NESTED]
    for sec, cls in _NESTED.items():
        keys += [f"{sec}.{f.name}" for f in dataclasses.fields(cls) if (sec, f.name) not in _SHADOWED]
    return keys


def set_option(cfg: PipelineConfig, key: str, value) -> None:
    """Set ``key`` (``name`` or ``section.name``) from a string or typed value."""
    key = key.strip().replace("-", "_")
    if "." in key:
        sec, name = key.split(".", 1)
        if sec not in _NESTED or not hasattr(getattr(cfg, sec), name) or (sec, name) in _SHADOWED:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(cfg, sec)
    else:
        name, target = key, cfg
        if name in _NESTED or not hasattr(cfg, name):
            raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, name)
    if isinstance(value, str):
        try:
            value = _coerce(value, current)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    setattr(target, name, value)


def load_config(path, cfg: PipelineConfig | None = None) -> PipelineConfig:
    """Read ``key = value`` lines; ``[section]`` headers prefix following keys."""
    cfg = cfg or PipelineConfig()
    section = ""
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        set_option(cfg, f"{section}.{k}" if section else k, v)
    return cfg


# --- run --------------------------------------------------------------------


@dataclass
class RunReport:
    frames: int = 0
    frames_without_pose: int = 0
    fusion_events: int = 0
    crf_events: int = 0
    fusion_frames: list = field(default_factory=list)
    crf_frames: list = field(default_factory=list)
    surfels: int = 0
    surfels_removed: int = 0
    created: int = 0
    fused: int = 0
    fused_acc: ConfusionAccumulator | None = None
    baseline_acc: ConfusionAccumulator | None = None
    crf_reports: list = field(default_factory=list)
    timings: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    label_names: tuple = ()
    map: SurfelMap | None = field(default=None, repr=False)

    @property
    def class_avg(self) -> float | None:
        return self.fused_acc.to_dict()["class_avg"] if self.fused_acc else None

    @property
    def baseline_class_avg(self) -> float | None:
        return self.baseline_acc.to_dict()["class_avg"] if self.baseline_acc else None

    def stage_means(self) -> dict:
        """Mean seconds per frame (integration, table) or per event (prediction, fusion, crf)."""
        per = lambda t, n: t / n if n else 0.0
        return {
            "integration": per(self.timings["integration"], self.frames),
            "table": per(self.timings["table"], self.frames),
            "prediction": per(self.timings["prediction"], self.fusion_events),
            "fusion": per(self.timings["fusion"], self.fusion_events),
            "crf": per(self.timings["crf"], self.crf_events),
        }

    def metrics(self) -> dict:
        """Deterministic run summary (no wall-clock values)."""
        names = list(self.label_names) or None
        return {
            "schedule_convention": SCHEDULE_CONVENTION,
            "frames": self.frames,
            "frames_without_pose": self.frames_without_pose,
            "fusion_events": self.fusion_events,
            "crf_events": self.crf_events,
            "surfels": self.surfels,
            "surfels_removed": self.surfels_removed,
            "surfels_created": self.created,
            "surfel_fusions": self.fused,
            "fused": self.fused_acc.to_dict(names) if self.fused_acc else None,
            "baseline": self.baseline_acc.to_dict(names) if self.baseline_acc else None,
            "crf": [
                {k: v for k, v in r.to_dict().items() if k != "wall_time"} for r in self.crf_reports
            ],
        }

    def timing_table(self) -> str:
        means = self.stage_means()
        lines = [f"{'stage':<12} {'total s':>10} {'mean ms':>10}"]
        for s in STAGES:
            m = means.get(s)
            lines.append(f"{s:<12} {self.timings[s]:>10.3f} {'' if m is None else f'{m * 1e3:10.2f}':>10}")
        return "\n".join(lines)


def _label_set(cfg: PipelineConfig) -> LabelSet:
    return LabelSet.from_file(cfg.labels) if cfg.labels else LabelSet.nyu13()


def _scene(cfg: PipelineConfig, labels: LabelSet) -> SceneSpec:
    if cfg.scene in ("box-room", "box_room", "default"):
        return box_room(labels)
    if cfg.scene in ("box-room-pan", "box_room_pan"):
        return box_room(labels, pan_orbit())
    path = Path(cfg.scene)
    if not path.is_file():
        raise ConfigError(f"scene {cfg.scene!r} is neither 'box-room' nor a JSON file")
    return SceneSpec.from_json(path.read_text())


def frame_source(cfg: PipelineConfig, labels: LabelSet):
    """Returns (intrinsics, iterator of (frame, pose-or-None))."""
    if cfg.scene is not None:
        spec = _scene(cfg, labels)
        spec.validate(labels.count)
        intr = geo.Intrinsics.kinect().scaled(*cfg.render_res)
        return intr, iter_render(spec, intr, cfg.n_frames)

    seq = Path(cfg.sequence)
    if not seq.is_dir():
        raise ConfigError(f"sequence directory {seq} does not exist")
    traj_path = Path(cfg.trajectory) if cfg.trajectory else seq / "trajectory.txt"
    if not traj_path.is_file():
        raise ConfigError(f"no trajectory at {traj_path}")
    intr_path = Path(cfg.intrinsics) if cfg.intrinsics else seq / "intrinsics.txt"
    intr = geo.Intrinsics.from_file(intr_path) if intr_path.is_file() else geo.Intrinsics.kinect()
    traj = load_trajectory(traj_path)
    frames = load_sequence(seq, cfg.depth_scale)

    def gen():
        for fr in frames:
            yield fr, associate_pose(traj, fr.timestamp, cfg.pose_tolerance)

    return intr, gen()


class _Predictor:
    def __init__(self, cfg: PipelineConfig, labels: LabelSet):
        self.dir = Path(cfg.predictions) if cfg.predictions else None
        self.model = None
        if self.dir is None:
            self.model = ConfusionModel.symmetric(
                labels.count, cfg.oracle_diag, sharpness=cfg.oracle_sharpness, seed=cfg.seed, mode=cfg.oracle_mode
            )
        self._cache = {}

    def __call__(self, frame):
        if frame.index in self._cache:
            return self._cache[frame.index]
        if self.dir is not None:
            path = self.dir / f"{frame.name}.sfpm"
            if not path.is_file():
                raise DataError(f"no prediction file {path}")
            pm = load_probability_map(path)
        else:
            if frame.gt_labels is None:
                raise ConfigError("the synthetic oracle needs ground-truth labels")
            pm = synthetic_oracle(frame.gt_labels, self.model, frame=frame.index)
        self._cache = {frame.index: pm}
        return pm


def run(cfg: PipelineConfig) -> RunReport:
    cfg.validate()
    labels = _label_set(cfg)
    intr, frames = frame_source(cfg, labels)
    map_params = cfg.map_params()
    crf_params = cfg.crf_params()
    smap = SurfelMap(labels, map_params)
    predict = _Predictor(cfg, labels)
    report = RunReport(label_names=labels.names)
    report.fused_acc = ConfusionAccumulator(labels.count)
    report.baseline_acc = ConfusionAccumulator(labels.count)
    timings = report.timings
    eval_w, eval_h = cfg.eval_res
    held = []  # eval frames kept for eval_mode == "final"

    executor = None if cfg.strict_sequential else ThreadPoolExecutor(max_workers=1)
    pending = None

    def tick(stage, t0):
        timings[stage] += time.perf_counter() - t0

    def finish_pending():
        nonlocal pending
        if pending is not None:
            t0 = time.perf_counter()
            result = pending.result()
            dense_crf.write_back(smap, result, crf_params.blend)
            report.crf_reports.append(result.report)
            pending = None
            tick("crf", t0)

    try:
        for frame, pose in frames:
            if pose is None:
                report.frames_without_pose += 1
                logger.debug("frame %s has no pose within tolerance; skipped", frame.name)
                continue
            report.frames += 1
            k = report.frames  # 1-based scheduling index
            try:
                t0 = time.perf_counter()
                stats = integrate_frame(smap, frame.rgb, frame.depth, pose, intr, map_params, frame=k)
                report.created += stats.created
                report.fused += stats.fused
                tick("integration", t0)

                finish_pending()

                pred = None
                if k % cfg.cnn_every == 0:
                    t0 = time.perf_counter()
                    pred = predict(frame)
                    tick("prediction", t0)
                    t0 = time.perf_counter()
                    idx = visible_set(smap, pose, intr, depth_max=map_params.depth_max)
                    fuse_prediction(smap, idx, pred)
                    tick("fusion", t0)
                    report.fusion_events += 1
                    report.fusion_frames.append(k)

                if cfg.crf_every > 0 and k % cfg.crf_every == 0 and len(smap):
                    t0 = time.perf_counter()
                    report.crf_events += 1
                    report.crf_frames.append(k)
                    if executor is None:
                        report.crf_reports.append(dense_crf.run_inference(smap, crf_params))
                    else:
                        pending = executor.submit(dense_crf.infer, smap.snapshot(), crf_params)
                    tick("crf", t0)

                t0 = time.perf_counter()
                removed = remove_unstable(smap, k, map_params)
                report.surfels_removed += removed.size
                if cfg.debug_checks:
                    smap.check_integrity()
                tick("table", t0)

                if frame.gt_labels is not None and k % cfg.eval_every == 0:
                    t0 = time.perf_counter()
                    baseline = pred if pred is not None else predict(frame)
                    if cfg.eval_mode == "immediate":
                        finish_pending()
                        _score(report, smap, pose, intr, frame, baseline, eval_w, eval_h)
                    else:
                        held.append((frame, pose, baseline))
                    tick("evaluation", t0)
            except SemFusionError as e:
                raise type(e)(f"frame {k} ({frame.name}): {e}") from e
        finish_pending()
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    t0 = time.perf_counter()
    for frame, pose, baseline in held:
        _score(report, smap, pose, intr, frame, baseline, eval_w, eval_h)
    tick("evaluation", t0)

    report.surfels = len(smap)
    if cfg.export_ply and len(smap):
        export_ply(smap, cfg.export_ply, mode=cfg.ply_mode)
    if cfg.metrics_out:
        Path(cfg.metrics_out).write_text(json.dumps(report.metrics(), indent=2, sort_keys=True) + "\n")
    report.map = smap
    return report


def _score(report, smap, pose, intr, frame, baseline, eval_w, eval_h):
    fused = project_map_labels(smap, pose, intr, intr.resolution, baseline)
    base = baseline.argmax() if baseline is not None else np.full(frame.depth.shape, 255)
    if base.shape != frame.depth.shape:
        base = downsample_nearest(base, frame.depth.shape[1], frame.depth.shape[0])
    gt = downsample_nearest(frame.gt_labels, eval_w, eval_h)
    depth = downsample_nearest(frame.depth, eval_w, eval_h)
    report.fused_acc = accumulate(report.fused_acc, downsample_nearest(fused, eval_w, eval_h), gt, depth)
    report.baseline_acc = accumulate(report.baseline_acc, downsample_nearest(base, eval_w, eval_h), gt, depth)


# --- experiments ------------------------------------------------------------


def estimated_fps(means: dict, skip: int) -> float:
    return 1.0 / (means["integration"] + means["table"] + (means["prediction"] + means["fusion"]) / skip)


def frequency_experiment(cfg: PipelineConfig, skip_exponents) -> list[tuple[int, float, float]]:
    """Accuracy and estimated frame rate when predicting every 2**n frames.

    Stage times are pooled over all runs so the frame-rate estimate uses a
    single set of per-stage costs.
    """
    skips = [2**int(n) for n in skip_exponents]
    if not skips:
        return []
    runs = []
    for skip in skips:
        c = dataclasses.replace(cfg, cnn_every=skip, export_ply=None, metrics_out=None)
        runs.append(run(c))
    tot = {s: sum(r.timings[s] for r in runs) for s in STAGES}
    frames = sum(r.frames for r in runs)
    events = sum(r.fusion_events for r in runs)
    means = {
        "integration": tot["integration"] / frames,
        "table": tot["table"] / frames,
        "prediction": tot["prediction"] / max(events, 1),
        "fusion": tot["fusion"] / max(events, 1),
    }
    return [(skip, r.class_avg, estimated_fps(means, skip)) for skip, r in zip(skips, runs)]


def crf_frequency_experiment(cfg: PipelineConfig, periods) -> list[tuple[int, float]]:
    rows = []
    for period in periods:
        c = dataclasses.replace(cfg, crf_every=int(period), export_ply=None, metrics_out=None)
        rows.append((int(period), run(c).class_avg))
    return rows
