"""Command-line entry point: ``semfusion {run,freq-exp,crf-exp,render-scene,eval}``.

Every config key is also a flag: ``cnn_every`` -> ``--cnn-every``,
``crf.theta_alpha`` -> ``--crf-theta-alpha``. Flags override ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import geometry as geo
from .dataset_io import load_sequence, render_scene, write_sequence
from .errors import ConfigError, DataError, SemFusionError
from .evaluation import ConfusionAccumulator, accumulate, downsample_nearest
from .pipeline import (
    PipelineConfig,
    _label_set,
    _scene,
    config_keys,
    crf_frequency_experiment,
    frequency_experiment,
    load_config,
    run,
    set_option,
)
from .prediction import load_probability_map, rescale_probability_map

logger = logging.getLogger("semfusion")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    defaults = PipelineConfig()
    for key in config_keys():
        if "." in key:
            sec, name = key.split(".")
            current = getattr(getattr(defaults, sec), name)
        else:
            current = getattr(defaults, key)
        kw = dict(dest=key, default=argparse.SUPPRESS)
        if isinstance(current, bool):
            p.add_argument(_flag(key), action=argparse.BooleanOptionalAction, **kw)
        else:
            p.add_argument(_flag(key), metavar=key.split(".")[-1].upper(), **kw)
    p.add_argument("--crf-iters", dest="crf_iterations", default=argparse.SUPPRESS, help="alias of --crf-iterations")
    p.add_argument("-v", "--verbose", action="store_true")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        load_config(args.config, cfg)
    for key in config_keys():
        if key in vars(args):
            value = vars(args)[key]
            set_option(cfg, key, value)
    return cfg


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="process a sequence or synthetic scene")
    _add_config_flags(p)

    p = sub.add_parser("freq-exp", help="accuracy vs prediction frequency (skip = 2**n)")
    _add_config_flags(p)
    p.add_argument("--skips", type=_int_list, default=list(range(8)), help="exponents n, e.g. 0,1,2")
    p.add_argument("--out", help="write the table as JSON")

    p = sub.add_parser("crf-exp", help="accuracy vs frames between CRF updates")
    _add_config_flags(p)
    p.add_argument("--periods", type=_int_list, default=[0, 10, 50, 100, 500])
    p.add_argument("--out", help="write the table as JSON")

    p = sub.add_parser("render-scene", help="render a synthetic sequence to disk")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--format", choices=("png", "pnm"), default="png")

    p = sub.add_parser("eval", help="score SFPM predictions against a labelled sequence")
    _add_config_flags(p)
    return parser


def _cmd_run(cfg: PipelineConfig) -> None:
    report = run(cfg)
    m = report.metrics()
    print(f"frames={report.frames} fusion_events={report.fusion_events} crf_events={report.crf_events} "
          f"surfels={report.surfels}")
    if report.fused_acc and report.fused_acc.total:
        print(f"fused    class_avg={m['fused']['class_avg']:.4f} pixel_avg={m['fused']['pixel_avg']:.4f}")
        print(f"baseline class_avg={m['baseline']['class_avg']:.4f} pixel_avg={m['baseline']['pixel_avg']:.4f}")
    print(report.timing_table())


def _cmd_freq(cfg: PipelineConfig, args) -> None:
    rows = frequency_experiment(cfg, args.skips)
    print(f"{'skip':>6} {'class_avg':>10} {'est_fps':>10}")
    for skip, acc, fps in rows:
        print(f"{skip:>6} {acc:>10.4f} {fps:>10.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps([{"skip": s, "class_avg": a, "est_fps": f} for s, a, f in rows], indent=2))


def _cmd_crf(cfg: PipelineConfig, args) -> None:
    rows = crf_frequency_experiment(cfg, args.periods)
    print(f"{'period':>7} {'class_avg':>10}")
    for period, acc in rows:
        print(f"{period:>7} {acc:>10.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps([{"period": p, "class_avg": a} for p, a in rows], indent=2))


def _cmd_render(cfg: PipelineConfig, args) -> None:
    labels = _label_set(cfg)
    if not cfg.scene:
        raise ConfigError("render-scene needs --scene")
    spec = _scene(cfg, labels)
    spec.validate(labels.count)
    intr = geo.Intrinsics.kinect().scaled(*cfg.render_res)
    frames, traj = render_scene(spec, intr, cfg.n_frames)
    write_sequence(args.out, frames, traj, intr, fmt=args.format, depth_scale=cfg.depth_scale)
    print(f"wrote {len(frames)} frames to {args.out}")


def _cmd_eval(cfg: PipelineConfig) -> None:
    if not cfg.sequence or not cfg.predictions:
        raise ConfigError("eval needs --sequence and --predictions")
    labels = _label_set(cfg)
    acc = ConfusionAccumulator(labels.count)
    w, h = cfg.eval_res
    for fr in load_sequence(cfg.sequence, cfg.depth_scale):
        if fr.gt_labels is None:
            continue
        path = Path(cfg.predictions) / f"{fr.name}.sfpm"
        if not path.is_file():
            raise DataError(f"missing prediction {path}")
        pm = rescale_probability_map(load_probability_map(path), fr.depth.shape[1], fr.depth.shape[0])
        acc = accumulate(
            acc,
            downsample_nearest(pm.argmax(), w, h),
            downsample_nearest(fr.gt_labels, w, h),
            downsample_nearest(fr.depth, w, h),
        )
    d = acc.to_dict(labels.names)
    print(json.dumps({k: d[k] for k in ("class_avg", "pixel_avg", "frames_evaluated", "ignored_pixels")}))
    if cfg.metrics_out:
        Path(cfg.metrics_out).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command != "render-scene" and args.command != "eval":
            cfg.validate()
        if args.command == "run":
            _cmd_run(cfg)
        elif args.command == "freq-exp":
            _cmd_freq(cfg, args)
        elif args.command == "crf-exp":
            _cmd_crf(cfg, args)
        elif args.command == "render-scene":
            _cmd_render(cfg, args)
        elif args.command == "eval":
            _cmd_eval(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SemFusionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
