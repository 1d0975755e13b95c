"""Command-line entry point: ``drivefusion <command> [flags]``.

Commands chain as gen -> prep -> train -> predict -> ensemble -> eval -> path/plot;
``run`` executes the whole chain from one YAML config. Exit codes: 0 success,
1 usage error, 2 missing or invalid data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import plots
from .dataset import GenConfig, generate_synthetic, load_chapter, load_manifest
from .dataset.records import DatasetError
from .ensemble import ANGLE_BINS, SPEED_BINS, BinPrior, build_prior, ensemble_series, plain_average
from .evaluate import EvalReport, per_zone_report
from .model_zoo import PRESET_NAMES, ModelError, model_preset
from .preprocess import TIERS, NormStats, build_cache, cache_root
from .series import AlignmentError, PredictionSeries, SeriesFormatError
from .trainer import TrainingError, predict_split, read_history, train, train_preset
from .trajectory import KinematicsConfig, integrate_path, write_path_csv

log = logging.getLogger("drivefusion")

STAMP = ".stamp.json"
DATA_ENV = "DRIVEFUSION_DATA"
GLOBALS = {"config", "seed", "out", "force"}
COMMANDS = ("gen", "prep", "train", "predict", "ensemble", "eval", "path", "plot", "run")


class UsageError(Exception):
    pass


class DataError(Exception):
    def __init__(self, path, reason="missing"):
        super().__init__(f"{reason}: {path}")
        self.path = path


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- helpers


def _default_data() -> str:
    return os.environ.get(DATA_ENV, "data")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(path)
    return path


def _manifest(root):
    _require(Path(root) / "manifest.json")
    return load_manifest(root)


def _up_to_date(out_dir: Path, params: dict, outputs, force: bool) -> bool:
    stamp = out_dir / STAMP
    if force or not stamp.exists():
        return False
    try:
        old = json.loads(stamp.read_text())
    except ValueError:
        return False
    return old == json.loads(json.dumps(params)) and all(Path(o).exists() for o in outputs)


def _stamp(out_dir: Path, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / STAMP).write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")


def _stamp_dir(path: Path) -> Path:
    # file outputs get a sibling stamp keyed on the file name
    return path.parent / f".{path.name}"


def _digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is not None:
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def _resolution(text: str) -> tuple:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"resolution must look like 160x90, got {text!r}") from None
    return w, h


def _tier_for(resolution) -> str | None:
    w, h = resolution
    return next((name for name, t in TIERS.items() if (t.width, t.height) == (w, h)), None)


def _check_preset(name: str) -> None:
    if name not in PRESET_NAMES:
        raise UsageError(f"unknown preset {name!r}; presets: {', '.join(PRESET_NAMES)}")


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> Path:
    root = Path(args.data)
    cfg = GenConfig(
        n_routes=args.routes,
        chapters_per_route=args.chapters,
        frames_per_chapter=args.frames,
        resolution=_resolution(args.resolution),
        seed=args.seed,
        split_fractions=tuple(args.split),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    params = {"cmd": "gen", **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}}
    if _up_to_date(root, params, [root / "manifest.json"], args.force):
        log.info("gen: %s is up to date", root)
        return root
    if (root / "manifest.json").exists() and not args.force:
        raise UsageError(f"{root} holds a dataset built with other settings; pass --force to replace it")
    generate_synthetic(cfg, root, overwrite=True)
    _stamp(root, params)
    log.info("gen: wrote %d chapters to %s", cfg.n_routes * cfg.chapters_per_route, root)
    return root


def cmd_prep(args) -> Path:
    manifest = _manifest(args.data)
    out = Path(args.prep_out) if args.prep_out else cache_root(args.data, args.tier, args.stride)
    src_stamp = Path(args.data) / STAMP
    params = {
        "cmd": "prep",
        "source": str(Path(args.data).resolve()),
        "source_stamp": src_stamp.read_text() if src_stamp.exists() else None,
        "tier": args.tier,
        "stride": args.stride,
    }
    if _up_to_date(out, params, [out / "manifest.json", out / "norm_stats.json"], args.force):
        log.info("prep: %s is up to date", out)
        return out
    try:
        build_cache(manifest, args.tier, args.stride, out_root=out, overwrite=True)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _stamp(out, params)
    log.info("prep: wrote %s", out)
    return out


def _train_labels(manifest):
    angles, speeds = [], []
    for entry in manifest.split_entries("train"):
        ch = load_chapter(manifest, entry.chapter_id, images=False)
        angles.append(ch.angles)
        speeds.append(ch.speeds)
    return np.concatenate(angles), np.concatenate(speeds)


def cmd_train(args) -> Path:
    _check_preset(args.preset)
    manifest = _manifest(args.data)
    out = Path(args.out)
    backbone = None if args.backbone == "native" else args.backbone
    spec = model_preset(args.preset, args.scale, backbone)
    overrides = {"seed": args.seed}
    for key, value in (("epochs", args.epochs), ("batch_size", args.batch_size), ("lr0", args.lr)):
        if value is not None:
            overrides[key] = value
    tier = args.tier or _tier_for(manifest.resolution)
    if tier:
        overrides["tier"] = tier
    cfg = train_preset(args.preset, **overrides)

    stats_path = Path(args.data) / "norm_stats.json"
    data_stamp = Path(args.data) / STAMP
    params = {
        "cmd": "train",
        "data": str(Path(args.data).resolve()),
        "data_stamp": data_stamp.read_text() if data_stamp.exists() else None,
        "spec": spec.to_json(),
        "config": {k: v for k, v in asdict(cfg).items() if k != "augment"},
        "augment": asdict(cfg.augment),
    }
    outputs = [out / n for n in ("best_angle.ckpt", "best_speed.ckpt", "last.ckpt", "history.csv",
                                 "norm_stats.json", "prior_angle.json", "prior_speed.json")]
    if _up_to_date(out, params, outputs, args.force):
        log.info("train: %s is up to date", out)
        return out
    stats = NormStats.load(stats_path) if stats_path.exists() else None
    result = train(spec, manifest, cfg, out_dir=out, stats=stats)
    result.best_angle.stats.save(out / "norm_stats.json")
    angles, speeds = _train_labels(manifest)
    build_prior(angles, ANGLE_BINS).save(out / "prior_angle.json")
    build_prior(speeds, SPEED_BINS).save(out / "prior_speed.json")
    _stamp(out, params)
    last = result.history[-1]
    log.info("train: %s epoch %d val angle %.3f speed %.3f", args.preset, last["epoch"], last["val_angle_mse"], last["val_speed_mse"])
    return out


def cmd_predict(args) -> Path:
    model_dir = Path(args.model)
    angle_ck = _require(model_dir / "best_angle.ckpt")
    speed_ck = _require(model_dir / "best_speed.ckpt")
    manifest = _manifest(args.data)
    output = Path(args.output)
    params = {
        "cmd": "predict",
        "model_stamp": (model_dir / STAMP).read_text() if (model_dir / STAMP).exists() else str(model_dir.resolve()),
        "data": str(Path(args.data).resolve()),
        "split": args.split,
    }
    if _up_to_date(_stamp_dir(output), params, [output], args.force):
        log.info("predict: %s is up to date", output)
        return output
    series = predict_split(angle_ck, manifest, args.split, speed_ck)
    if not len(series):
        raise DataError(Path(args.data), f"no predictable frames in split {args.split!r}")
    series.to_csv(output)
    _stamp(_stamp_dir(output), params)
    log.info("predict: %d rows -> %s", len(series), output)
    return output


def cmd_ensemble(args) -> Path:
    output = Path(args.output)
    params = {"cmd": "ensemble", "inputs": _digest(*map(_require, args.members), _require(args.prior_angle),
                                                   args.prior_speed and _require(args.prior_speed))}
    if _up_to_date(_stamp_dir(output), params, [output], args.force):
        log.info("ensemble: %s is up to date", output)
        return output
    members = [PredictionSeries.from_csv(m) for m in args.members]
    angle_prior = BinPrior.load(_require(args.prior_angle))
    speed_prior = BinPrior.load(_require(args.prior_speed)) if args.prior_speed else None
    if speed_prior is None:
        combined = ensemble_series(members, angle_prior, angle_prior)
        combined = combined.with_values(combined.angle_deg, plain_average(members).speed_kmh)
    else:
        combined = ensemble_series(members, angle_prior, speed_prior)
    combined.to_csv(output)
    _stamp(_stamp_dir(output), params)
    log.info("ensemble: %d members -> %s", len(members), output)
    return output


def _truth(manifest, series):
    lookup = {}
    for cid in dict.fromkeys(series.chapter_ids):
        try:
            ch = load_chapter(manifest, cid, images=False)
        except KeyError:
            raise DataError(Path(manifest.root_path) / cid, "chapter not in dataset") from None
        for f in ch.frames:
            lookup[(cid, f.frame_index)] = f
    frames = []
    for cid, idx in zip(series.chapter_ids, series.frame_index.tolist()):
        if (cid, idx) not in lookup:
            raise DataError(Path(manifest.root_path) / cid, f"frame {idx} has no label")
        frames.append(lookup[(cid, idx)])
    return frames


def cmd_eval(args) -> Path:
    output = Path(args.output)
    manifest = _manifest(args.data)
    params = {"cmd": "eval", "inputs": _digest(_require(args.pred)), "data": str(Path(args.data).resolve()),
              "data_stamp": _digest(Path(args.data) / "manifest.json")}
    if _up_to_date(_stamp_dir(output), params, [output, output.with_suffix(".txt")], args.force):
        log.info("eval: %s is up to date", output)
        return output
    series = PredictionSeries.from_csv(args.pred)
    frames = _truth(manifest, series)
    report = per_zone_report(
        series.angle_deg,
        series.speed_kmh,
        [f.angle_deg for f in frames],
        [f.speed_kmh for f in frames],
        [f.zone_tags for f in frames],
    )
    output.parent.mkdir(parents=True, exist_ok=True)
    report.save(output)
    table = report.table()
    output.with_suffix(".txt").write_text(table)
    _stamp(_stamp_dir(output), params)
    print(table, end="")
    return output


def cmd_path(args) -> Path:
    series = PredictionSeries.from_csv(_require(args.input))
    if not len(series):
        raise DataError(Path(args.input), "empty prediction file")
    chapter = args.chapter or series.chapter_ids[0]
    sel = np.array([c == chapter for c in series.chapter_ids])
    if not sel.any():
        raise UsageError(f"chapter {chapter!r} is not in {args.input}")
    ts = series.timestamp_ms[sel]
    dt = args.dt or (float(np.median(np.diff(ts))) / 1000.0 if len(ts) > 1 else 0.1)
    path = integrate_path(series.angle_deg[sel], series.speed_kmh[sel], KinematicsConfig(dt=dt, gain_k=args.gain_k))
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_path_csv(path, output)
    if args.plot:
        plots.plot_paths({"prediction": path}, args.plot, title=chapter)
    log.info("path: %s, %d points -> %s", chapter, len(path), output)
    return output


def cmd_plot(args) -> Path:
    out = Path(args.plot_dir)
    manifest = _manifest(args.data)
    params = {"cmd": "plot", "inputs": _digest(args.pred and _require(args.pred), args.history and _require(args.history)),
              "data": str(Path(args.data).resolve()), "gain_k": args.gain_k}
    if _up_to_date(out, params, [out / "angle_count.png"], args.force):
        log.info("plot: %s is up to date", out)
        return out
    out.mkdir(parents=True, exist_ok=True)
    if args.pred:
        series = PredictionSeries.from_csv(_require(args.pred))
        frames = _truth(manifest, series)
        for cid in dict.fromkeys(series.chapter_ids):
            sel = np.array([c == cid for c in series.chapter_ids])
            fr = [f for f, s in zip(frames, sel) if s]
            t = series.timestamp_ms[sel] / 1000.0
            ta = np.array([f.angle_deg for f in fr])
            tv = np.array([f.speed_kmh for f in fr])
            plots.plot_predictions(t, ta, series.angle_deg[sel], tv, series.speed_kmh[sel], out / f"predictions_{cid}.png", cid)
            dt = float(np.median(np.diff(t))) if len(t) > 1 else 0.1
            kin = KinematicsConfig(dt=dt, gain_k=args.gain_k)
            paths = {
                "ground truth": integrate_path(ta, tv, kin),
                "prediction": integrate_path(series.angle_deg[sel], series.speed_kmh[sel], kin),
            }
            plots.plot_paths(paths, out / f"path_{cid}.png", cid)
    angles, _ = _train_labels(manifest)
    plots.plot_angle_histogram(angles, out / "angle_count.png")
    if args.history:
        plots.plot_history(read_history(_require(args.history)), out / "trainloss.png")
    _stamp(out, params)
    log.info("plot: figures in %s", out)
    return out


# --------------------------------------------------------------------------- run


def cmd_run(args, config: dict) -> Path:
    """gen -> prep -> train (one or more seeds per preset) -> predict -> ensemble -> eval -> plot."""
    out = Path(args.out)
    data = Path(args.data)
    sections = {k: v for k, v in config.items() if isinstance(v, dict)}
    presets = args.presets or [sections.get("train", {}).get("preset", "model1")]
    for p in presets:
        _check_preset(p)
    common = ["--seed", str(args.seed)] + (["--force"] if args.force else [])

    def stage(name, *argv):
        ns = _parse([name, *common, *argv], config)
        return COMMAND_FUNCS[name](ns)

    stage("gen", "--data", str(data))
    prep_cfg = sections.get("prep", {})
    prepared = cache_root(data, prep_cfg.get("tier", "s3"), int(prep_cfg.get("stride", 1)))
    stage("prep", "--data", str(data), "--prep-out", str(prepared))

    members = []
    for preset in presets:
        for k in range(args.members):
            seed = args.seed + k
            tdir = out / "train" / f"{preset}_seed{seed}"
            ns = _parse(["train", "--data", str(prepared), "--preset", preset, "--out", str(tdir),
                         *common[2:]], config)
            ns.seed = seed
            cmd_train(ns)
            members.append((f"{preset}_seed{seed}", tdir))

    reports = {}
    for split in args.splits:
        csvs = []
        for name, tdir in members:
            pred = out / "predict" / f"{name}_{split}.csv"
            stage("predict", "--model", str(tdir), "--data", str(prepared), "--split", split, "--output", str(pred))
            csvs.append(pred)
            rep = out / "eval" / f"{name}_{split}.json"
            stage("eval", "--pred", str(pred), "--data", str(prepared), "--output", str(rep))
            reports[f"{name}_{split}"] = rep
        if len(csvs) > 1:
            ens = out / "predict" / f"ensemble_{split}.csv"
            tdir = members[0][1]
            stage("ensemble", "--members", *map(str, csvs), "--prior-angle", str(tdir / "prior_angle.json"),
                  "--prior-speed", str(tdir / "prior_speed.json"), "--output", str(ens))
            rep = out / "eval" / f"ensemble_{split}.json"
            stage("eval", "--pred", str(ens), "--data", str(prepared), "--output", str(rep))
            reports[f"ensemble_{split}"] = rep
        first = out / "predict" / f"{members[0][0]}_{split}.csv"
        stage("plot", "--data", str(prepared), "--pred", str(ens if len(csvs) > 1 else first),
              "--history", str(members[0][1] / "history.csv"), "--plot-dir", str(out / "plots" / split))

    summary = {name: EvalReport.from_json(json.loads(p.read_text())).to_json()["overall"] for name, p in reports.items()}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("run: metrics in %s", out / "metrics.json")
    return out


COMMAND_FUNCS = {
    "gen": cmd_gen,
    "prep": cmd_prep,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "path": cmd_path,
    "plot": cmd_plot,
}


# --------------------------------------------------------------------------- parsing


def _global_flags(parser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML config file (see README for the schema)")
    parser.add_argument("--seed", type=int, default=d if suppress else 0, help="master seed for every stage")
    parser.add_argument("--out", default=d if suppress else "runs", help="output directory")
    parser.add_argument("--force", action="store_true", default=d if suppress else False, help="redo completed stages")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drivefusion", description="Steering-angle and speed prediction pipeline.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("gen", "generate a synthetic driving dataset")
    p.add_argument("--data", default=_default_data(), help=f"dataset root (default ${DATA_ENV} or ./data)")
    p.add_argument("--routes", type=int, default=4)
    p.add_argument("--chapters", type=int, default=4, help="chapters per route")
    p.add_argument("--frames", type=int, default=300, help="frames per chapter")
    p.add_argument("--resolution", default="160x90")
    p.add_argument("--split", type=float, nargs=3, default=list(GenConfig().split_fractions),
                   metavar=("TRAIN", "VAL", "TEST"))

    p = add("prep", "downsample a dataset and fit normalization statistics")
    p.add_argument("--data", default=_default_data())
    p.add_argument("--tier", default="s3", choices=sorted(TIERS))
    p.add_argument("--stride", type=int, default=1, help="keep every n-th frame")
    p.add_argument("--prep-out", default=None, help="prepared dataset root (default <data>_<tier>_<stride>)")

    p = add("train", "train a preset model")
    p.add_argument("--data", default=_default_data())
    p.add_argument("--preset", default="model1", help=f"one of: {', '.join(PRESET_NAMES)}")
    p.add_argument("--scale", type=float, default=1.0, help="width multiplier for hidden layers")
    p.add_argument("--backbone", default="toy_conv", help="toy_conv, a residual family, or 'native' for the preset's own")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="initial learning rate")
    p.add_argument("--tier", default=None, choices=sorted(TIERS))

    p = add("predict", "predict angle and speed for a split")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--data", default=_default_data())
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.add_argument("--output", required=True, help="prediction CSV")

    p = add("ensemble", "prior-weighted combination of prediction files")
    p.add_argument("--members", nargs="+", required=True)
    p.add_argument("--prior-angle", required=True)
    p.add_argument("--prior-speed", default=None, help="speed prior; plain average when omitted")
    p.add_argument("--output", required=True)

    p = add("eval", "MSE overall and per zone")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", default=_default_data())
    p.add_argument("--output", required=True, help="report JSON; a .txt table is written alongside")

    p = add("path", "dead-reckon a path from a prediction file")
    p.add_argument("--input", required=True)
    p.add_argument("--chapter", default=None, help="chapter to integrate (default: first in the file)")
    p.add_argument("--dt", type=float, default=None, help="step in seconds (default: from timestamps)")
    p.add_argument("--gain-k", type=float, default=1.0)
    p.add_argument("--output", required=True, help="path CSV")
    p.add_argument("--plot", default=None, help="optional image file for the path")

    p = add("plot", "figures: overlays, paths, angle histogram, training curves")
    p.add_argument("--data", default=_default_data())
    p.add_argument("--pred", default=None)
    p.add_argument("--history", default=None, help="history.csv from a training run")
    p.add_argument("--gain-k", type=float, default=1.0)
    p.add_argument("--plot-dir", required=True)

    p = add("run", "full chain from a config")
    p.add_argument("--data", default=_default_data())
    p.add_argument("--presets", nargs="+", default=None)
    p.add_argument("--members", type=int, default=2, help="training seeds per preset")
    p.add_argument("--splits", nargs="+", default=["validation", "test"])
    return parser


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = _require(path)
    try:
        config = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise DataError(path, f"unreadable config ({exc})") from None
    if not isinstance(config, dict):
        raise DataError(path, "config must be a mapping")
    return config


def _config_defaults(parser, command: str, config: dict) -> dict:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    dests = {a.dest for a in sub._actions} - GLOBALS
    merged = {k: v for k, v in config.items() if not isinstance(v, dict)}
    merged.update(config.get(command, {}) or {})
    unknown = sorted(k for k in merged if k.replace("-", "_") not in dests and k not in COMMANDS)
    unknown = [k for k in unknown if k not in GLOBALS]
    if unknown and command != "run":
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    return {k.replace("-", "_"): v for k, v in merged.items() if k.replace("-", "_") in dests}


def _parse(argv, config=None):
    parser = build_parser()
    pre = parser.parse_known_args(argv)[0] if config is None else None
    if config is None:
        config = _load_config(pre.config)
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    sub.set_defaults(**_config_defaults(parser, command, config))
    parser.set_defaults(**{k: config[k] for k in GLOBALS - {"config"} if k in config})
    args = parser.parse_args(argv)
    args._config = config
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = _parse(argv)
        if args.command == "run":
            cmd_run(args, args._config)
        else:
            COMMAND_FUNCS[args.command](args)
    except UsageError as exc:
        print(f"drivefusion: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"drivefusion: data error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, AlignmentError, SeriesFormatError, TrainingError, ModelError, FileNotFoundError) as exc:
        print(f"drivefusion: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
