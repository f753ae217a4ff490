"""Command-line entry point: ``radarsparse <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric failure (diverged training).
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BLOCK_TYPES
from .config import PRESETS, Config, ConfigError, load_config, save_config
from .detection import evaluate, evaluate_scenes, read_detections, read_ground_truth, write_detections, write_ground_truth
from .nn import load_checkpoint, save_checkpoint
from .points import ParseError, PointCloud, load_points_csv, save_points_csv, synth_scene
from .render import RENDER_MODES, dump_grid

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _points(path) -> PointCloud:
    try:
        return load_points_csv(path)
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}", EXIT_DATA) from None


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid threshold list {text!r}") from None
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must be positive")
    return vals


def _scenes(args, cfg: Config):
    from .model import load_scenes, toy_scene_spec

    if args.scenes is None:
        g = cfg.grid
        return [toy_scene_spec((g.x_min, g.x_max, g.y_min, g.y_max))]
    try:
        return load_scenes(args.scenes)
    except OSError as exc:
        raise CliError(f"{args.scenes}: {exc.strerror}", EXIT_DATA) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{args.scenes}: bad scene description: {exc}", EXIT_DATA) from None


# --------------------------------------------------------------------------
# commands


def cmd_render(args) -> int:
    from .render import Renderer

    cfg = _config(args)
    mode = args.mode or cfg.render.mode
    cloud = _points(args.points)
    r = cfg.render
    renderer = Renderer(mode, r.f_out, r.K, r.radius, r.sigma, r.use_coords, seed=cfg.seed).eval()
    g = renderer(cfg.grid_spec(), cloud)
    if args.out:
        dump_grid(g, args.out)
    print(f"active {len(g)} density {len(g) / g.spec.num_cells:.6g}")
    return EXIT_OK


def _load_model(cfg: Config, params: str | None):
    from .model import Detector

    model = Detector(cfg)
    if params:
        try:
            state = load_checkpoint(params)
        except OSError as exc:
            raise CliError(f"{params}: {exc.strerror}", EXIT_DATA) from None
        except ValueError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
        try:
            model.load_state_dict(state)
        except KeyError as exc:
            raise CliError(f"checkpoint does not match the config: {exc.args[0]}", EXIT_CONFIG) from None
        except ValueError as exc:
            raise CliError(f"checkpoint does not match the config: {exc}", EXIT_CONFIG) from None
    return model.eval()


def cmd_forward(args) -> int:
    cfg = _config(args)
    cloud = _points(args.points)
    model = _load_model(cfg, args.params)
    dets = model.predict(cloud)
    write_detections(args.out, dets)
    print(f"detections {len(dets)}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .model import Detector, TrainingError, materialize, train_toy

    cfg = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.lr is not None:
        cfg.train.lr = args.lr
    cfg.validate()
    try:
        scenes = materialize(_scenes(args, cfg))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    model = Detector(cfg)
    t = cfg.train
    try:
        result = train_toy(model, scenes, t.epochs, t.lr, seed=cfg.seed, rcs_sigma=t.rcs_sigma,
                           clip_norm=t.clip_norm)
    except TrainingError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from None
    save_checkpoint(model.state_dict(), args.out)
    trace = Path(args.trace) if args.trace else Path(str(args.out) + ".loss.csv")
    with trace.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([k, repr(v)] for k, v in enumerate(result.losses))
    L = result.losses
    print(f"steps {len(L)} initial_loss {L[0]:.6g} final_loss {L[-1]:.6g} ratio {L[-1] / L[0]:.6g}")
    return EXIT_OK


def metrics_rows(metrics, thresholds) -> list[tuple[str, str, float]]:
    """(metric, threshold, value) rows; per class plus the class mean."""
    rows = []
    for cls in sorted(metrics):
        m = metrics[cls]
        for t in thresholds:
            rows.append((f"{cls}/AP", repr(float(t)), m.ap[float(t)]))
        rows.append((f"{cls}/mAP", "", m.mean_ap))
        rows.append((f"{cls}/ASE", "", m.ase))
        rows.append((f"{cls}/AOE", "", m.aoe))
    scored = [m for m in metrics.values() if not all(math.isnan(v) for v in m.ap.values())]
    for t in thresholds:
        rows.append(("AP", repr(float(t)), float(np.mean([m.ap[float(t)] for m in scored])) if scored else math.nan))
    rows.append(("mAP", "", float(np.mean([m.mean_ap for m in scored])) if scored else math.nan))
    return rows


def _metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "threshold", "value"])
    for name, t, v in rows:
        w.writerow([name, t, repr(float(v))])
    return buf.getvalue()


def cmd_eval(args) -> int:
    try:
        dets = read_detections(args.detections)
        gt = read_ground_truth(args.ground_truth)
    except ParseError as exc:
        raise CliError(f"malformed file: {exc}", EXIT_DATA) from None
    except OSError as exc:
        raise CliError(f"{exc.filename}: {exc.strerror}", EXIT_DATA) from None
    metrics = evaluate(dets, gt, args.thresholds, classes=sorted({c for c, _ in gt} | {d.class_id for d in dets}))
    rows = metrics_rows(metrics, args.thresholds)
    print(f"{'class':<6} " + " ".join(f"AP@{t:g}".rjust(8) for t in args.thresholds)
          + f" {'mAP':>8} {'ASE':>8} {'AOE[deg]':>9} {'TP':>4}")
    for cls in sorted(metrics):
        m = metrics[cls]
        print(f"{cls:<6} " + " ".join(f"{m.ap[float(t)]:8.4f}" for t in args.thresholds)
              + f" {m.mean_ap:8.4f} {m.ase:8.4f} {math.degrees(m.aoe):9.3f} {m.tp_count:4d}")
    text = _metrics_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    else:
        print()
        print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench

    cfg = _config(args)
    cloud = _points(args.points)
    report = bench(cfg, cloud, args.repeat, args.dense_max_cells)
    print(report.format())
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "kind", "pairs", "macs", "dense_macs", "seconds"])
            for s in report.layers:
                w.writerow([s.name, s.kind, s.pairs, s.macs, s.dense_macs, repr(s.seconds)])
    return EXIT_OK


def cmd_dump_config(args) -> int:
    cfg = _config(args)
    if args.out:
        save_config(cfg, args.out)
    else:
        from .config import config_to_ini
        print(config_to_ini(cfg), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    specs = _scenes(args, cfg)
    if not 0 <= args.index < len(specs):
        raise CliError(f"--index {args.index} out of range for {len(specs)} scene(s)", EXIT_CONFIG)
    try:
        cloud, gt = synth_scene(specs[args.index])
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    save_points_csv(cloud, args.points)
    if args.ground_truth:
        write_ground_truth(args.ground_truth, gt)
    print(f"points {len(cloud)} objects {len(gt)}")
    return EXIT_OK


def run_ablation(cfg: Config, specs, epochs: int | None = None):
    """Train and evaluate every rendering x backbone pair on the same scenes.

    Returns one dict per combination with AP per threshold, mAP, ASE, AOE
    (class means over classes present in the ground truth).
    """
    from .model import Detector, TrainingError, materialize, train_toy

    scenes = materialize(specs)
    out = []
    for mode in RENDER_MODES:
        for block in BLOCK_TYPES:
            c = cfg.with_overrides(mode=mode, block_type=block)
            model = Detector(c)
            t = c.train
            row = {"mode": mode, "backbone": block}
            try:
                train_toy(model, scenes, epochs or t.epochs, t.lr, seed=c.seed, rcs_sigma=t.rcs_sigma,
                          clip_norm=t.clip_norm)
            except TrainingError as exc:
                row["status"] = f"diverged at step {exc.step}"
                out.append(row)
                continue
            present = sorted({cls for _, gt in scenes for cls, _ in gt})
            metrics = evaluate_scenes([(model.predict(cloud), gt) for cloud, gt in scenes], THRESHOLDS,
                                      classes=present)
            for t_ in THRESHOLDS:
                row[f"AP@{t_:g}"] = float(np.mean([metrics[c_].ap[t_] for c_ in present]))
            row["mAP"] = float(np.mean([metrics[c_].mean_ap for c_ in present]))
            row["ASE"] = float(np.nanmean([metrics[c_].ase for c_ in present])) if any(
                metrics[c_].tp_count for c_ in present) else math.nan
            row["AOE"] = float(np.nanmean([metrics[c_].aoe for c_ in present])) if any(
                metrics[c_].tp_count for c_ in present) else math.nan
            row["status"] = "ok"
            out.append(row)
    return out


def cmd_ablate(args) -> int:
    cfg = _config(args)
    try:
        specs = _scenes(args, cfg)
        rows = run_ablation(cfg, specs, args.epochs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    cols = ["mode", "backbone"] + [f"AP@{t:g}" for t in THRESHOLDS] + ["mAP", "ASE", "AOE", "status"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n", restval="nan")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}", EXIT_CONFIG)


def _add_config(p):
    p.add_argument("--config", help="INI config file (overrides the preset)")
    p.add_argument("--preset", choices=PRESETS, help="base configuration (default: paper)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for compatibility; the engine is single-threaded and deterministic")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="radarsparse", description="Sparse radar BEV detection toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="render a point CSV into a sparse grid dump")
    _add_config(p)
    p.add_argument("--points", required=True)
    p.add_argument("--mode", choices=RENDER_MODES, help="override render.mode")
    p.add_argument("--out", help="grid dump path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("forward", help="run the detector on a point CSV")
    _add_config(p)
    p.add_argument("--points", required=True)
    p.add_argument("--params", help="checkpoint (random init when omitted)")
    p.add_argument("--out", required=True, help="detections file")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train-toy", help="overfit the detector on synthetic scenes")
    _add_config(p)
    p.add_argument("--scenes", help="scene JSON (default: the built-in toy scene)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--thresholds", type=_thresholds, default=THRESHOLDS)
    p.add_argument("--csv", help="write the metrics CSV here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sparse vs dense MACs and timing of the backbone")
    _add_config(p)
    p.add_argument("--points", required=True)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--dense-max-cells", type=int, default=16384,
                   help="skip the timed dense run above this many grid cells")
    p.add_argument("--csv", help="per-layer CSV output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-config", help="print or write the effective config")
    _add_config(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_config)

    p = sub.add_parser("synth", help="write a synthetic scene as points CSV + ground truth")
    _add_config(p)
    p.add_argument("--scenes", help="scene JSON (default: the built-in toy scene)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--points", required=True)
    p.add_argument("--ground-truth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train + evaluate all rendering x backbone combinations")
    _add_config(p)
    p.add_argument("--scenes", help="scene JSON (default: the built-in toy scene)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise CliError("--threads must be >= 1", EXIT_CONFIG)
        if getattr(args, "repeat", 1) < 1:
            raise CliError("--repeat must be >= 1", EXIT_CONFIG)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
