"""Command-line entry point: ``spermnet <subcommand> ...``.

Every subcommand writes a JSON manifest of its effective configuration next to
its outputs.  Exit status is 0 on success, 2 for usage or input errors and 3
for numerical failures.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    KINDS,
    N_CHUNKS,
    TASKS,
    DatasetError,
    DatasetFile,
    assign_folds,
    build_video_samples,
    load_labels,
    render_counts,
    write_dataset,
)
from .flow import FarnebackParams, FlowError, estimate_flow, flow_to_rgb
from .media import MediaError, load_image, open_video, save_image, to_grayscale
from .nn import ConfigError, ShapeError, WeightError, build_model, export_weights, import_weights
from .training import (
    MetricsReport,
    NumericalError,
    TrainConfig,
    TrainingError,
    evaluate,
    per_video,
    run_cross_validation,
    train,
    write_epoch_log,
)

log = logging.getLogger("spermnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
INPUT_ERRORS = (
    FileNotFoundError, NotADirectoryError, IsADirectoryError, DatasetError, MediaError, FlowError,
    TrainingError, WeightError, ConfigError, ShapeError,
)

PREPROCESS_DEFAULTS = {
    "kind": "D2",
    "task": "motility",
    "n_chunks": N_CHUNKS,
    "random_chunks": False,
    "standardize": False,
    "seed": 0,
    "flow": FarnebackParams().as_dict(),
}


class UsageError(ValueError):
    pass


# -- configuration -------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str], defaults: dict) -> dict:
    """Apply ``a.b=value`` overrides; keys must exist in ``defaults``."""
    out = copy.deepcopy(config)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node, ref = out, defaults
        for p in parts[:-1]:
            if not isinstance(ref, dict) or not isinstance(ref.get(p), dict):
                raise UsageError(f"unknown config key {key!r}")
            ref = ref[p]
            node = node.setdefault(p, {})
        if not isinstance(ref, dict) or parts[-1] not in ref:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return out


def _check_keys(config: dict, defaults: dict, prefix: str = ""):
    for key, value in config.items():
        if key not in defaults:
            raise UsageError(f"unknown config key {prefix + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            _check_keys(value, defaults[key], f"{prefix}{key}.")


def load_run_config(args, defaults: dict) -> tuple[dict, set[str]]:
    """Defaults <- ``--config`` file <- ``--set`` overrides <- ``--seed``.

    Also returns the top-level keys the user set explicitly.
    """
    config = copy.deepcopy(defaults)
    explicit: set[str] = set()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        _check_keys(data, defaults)
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
        explicit |= set(data)
    config = apply_overrides(config, args.set or [], defaults)
    explicit |= {item.split("=", 1)[0].split(".")[0] for item in args.set or []}
    if args.seed is not None:
        config["seed"] = args.seed
        explicit.add("seed")
    return config, explicit


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, inputs: dict, outputs: list) -> dict:
    manifest = {
        "tool": "spermnet",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _threads(args, default: int) -> int:
    n = default if args.threads is None else args.threads
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------


def _find_video(videos: Path, vid: str):
    for cand in (videos / vid, videos / f"{vid}.rgb24"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"video {vid!r} not found under {videos}")


def cmd_preprocess(args) -> int:
    config, _ = load_run_config(args, PREPROCESS_DEFAULTS)
    if config["kind"] not in KINDS:
        raise UsageError(f"kind must be D1 or D2, got {config['kind']!r}")
    if config["task"] not in TASKS:
        raise UsageError(f"task must be motility or morphology, got {config['task']!r}")
    videos = Path(args.videos)
    if not videos.is_dir():
        raise FileNotFoundError(f"videos directory not found: {videos}")
    labels_path = Path(args.labels)
    if not labels_path.is_file():
        raise FileNotFoundError(f"labels file not found: {labels_path}")
    if args.folds and not Path(args.folds).is_file():
        raise FileNotFoundError(f"fold file not found: {args.folds}")
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    labels = load_labels(labels_path)
    if not labels:
        raise DatasetError(f"{labels_path}: no labeled videos")
    folds = assign_folds(labels, args.folds)
    params = FarnebackParams(**config["flow"])
    threads = _threads(args, os.cpu_count() or 1)
    rng = np.random.default_rng(config["seed"]) if config["random_chunks"] else None

    def samples():
        for rec in labels:
            src = open_video(_find_video(videos, rec.video_id))
            if src.id != rec.video_id:
                src = dataclasses.replace(src, id=rec.video_id)
            log.info("preprocessing %s (%d frames)", rec.video_id, src.frame_count)
            yield from build_video_samples(src, config["kind"], rec, config["task"], params,
                                           config["n_chunks"], rng, threads)

    extra = {
        "command": "preprocess",
        "config": config,
        "task": config["task"],
        "folds": folds,
        "inputs": {"videos": str(videos), "labels": str(labels_path), "folds": str(args.folds or "")},
        "tool_version": __version__,
        "standardize": bool(config["standardize"]),
    }
    manifest = write_dataset(samples(), out, params, extra)
    print(render_counts(manifest["per_video_counts"]), end="")
    print(f"wrote {manifest['sample_count']} {config['kind']} samples to {out}")
    return EXIT_OK


def cmd_flow(args) -> int:
    config, _ = load_run_config(args, FarnebackParams().as_dict())
    params = FarnebackParams(**{k: v for k, v in config.items() if k != "seed"})
    a = load_image(args.frame_a)
    b = load_image(args.frame_b)
    if (a.width, a.height) != (b.width, b.height):
        raise MediaError(f"frame sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.suffix.lower() != ".png":
        out = out.with_suffix(".png")  # lossless, since flow images are network inputs
    out.parent.mkdir(parents=True, exist_ok=True)
    flow = estimate_flow(to_grayscale(a), to_grayscale(b), params)
    save_image(flow_to_rgb(flow), out)
    write_manifest(str(out) + ".manifest.json", "flow", params.as_dict(),
                   {"frame_a": args.frame_a, "frame_b": args.frame_b}, [out])
    print(f"wrote flow image to {out}")
    return EXIT_OK


def _train_config(args, dataset) -> TrainConfig:
    defaults = TrainConfig().to_dict()
    config, explicit = load_run_config(args, defaults)
    # dataset kind and task follow the dataset unless the user pinned them
    if "dataset_kind" not in explicit:
        config["dataset_kind"] = dataset.dataset_kind
    if "task" not in explicit:
        config["task"] = dataset.task
    cfg = TrainConfig.from_dict(config)
    if cfg.dataset_kind != dataset.dataset_kind:
        raise TrainingError(f"config dataset_kind {cfg.dataset_kind} does not match dataset {dataset.dataset_kind}")
    if cfg.task != dataset.task:
        raise TrainingError(f"config task {cfg.task} does not match dataset task {dataset.task}")
    return cfg


def _open_dataset(path) -> DatasetFile:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    ds = DatasetFile(path)
    if len(ds) == 0:
        raise DatasetError(f"{path}: dataset is empty")
    return ds


def _dataset_folds(ds: DatasetFile, fold_path) -> dict[str, int]:
    ids = sorted(set(ds.video_ids))
    if fold_path:
        if not Path(fold_path).is_file():
            raise FileNotFoundError(f"fold file not found: {fold_path}")
        return assign_folds(ids, fold_path)
    mpath = Path(str(ds.path) + ".manifest.json")
    if mpath.is_file():
        stored = json.loads(mpath.read_text()).get("folds")
        if stored:
            return assign_folds(ids, {k: int(v) for k, v in stored.items()})
    return assign_folds(ids)


def cmd_train(args) -> int:
    ds = _open_dataset(args.dataset)
    cfg = _train_config(args, ds)
    out = _out_dir(args)
    result = train(cfg, ds)
    export_weights(result.model, out / "weights.spwt")
    write_epoch_log(result.logs, out / "epochs.csv")
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), {"dataset": args.dataset},
                   [out / "weights.spwt", out / "epochs.csv"])
    print(f"trained {cfg.epochs} epochs; best epoch {result.best_epoch}; weights in {out / 'weights.spwt'}")
    return EXIT_OK


def _write_predictions(path, ids, preds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "p1", "p2", "p3"])
        for vid, p in zip(ids, preds):
            w.writerow([vid, *(repr(float(v)) for v in p)])


def cmd_cv(args) -> int:
    ds = _open_dataset(args.dataset)
    cfg = _train_config(args, ds)
    folds = _dataset_folds(ds, args.folds)
    out = _out_dir(args)
    result = run_cross_validation(cfg, ds, folds, threads=_threads(args, 1))
    files = [out / "metrics.csv", out / "metrics_chunk.csv", out / "table.txt", out / "predictions.csv"]
    files[0].write_text(result.report.to_csv())
    files[1].write_text(result.report.to_csv(chunk=True))
    table = result.report.render()
    files[2].write_text(table)
    ids = sorted(result.predictions)
    _write_predictions(files[3], ids, [result.predictions[v] for v in ids])
    for f, logs in result.fold_logs.items():
        write_epoch_log(logs, out / f"epochs_fold{f}.csv")
        files.append(out / f"epochs_fold{f}.csv")
    config = cfg.to_dict() | {"folds": folds}
    write_manifest(out / "manifest.json", "cv", config, {"dataset": args.dataset}, files)
    print(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    run = Path(args.run)
    mpath = run / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"training manifest not found: {mpath}")
    trained = json.loads(mpath.read_text())
    if trained.get("command") != "train":
        raise UsageError(f"{mpath} is not a training run manifest")
    cfg = TrainConfig.from_dict(trained["config"])
    ds = _open_dataset(args.dataset)
    if cfg.dataset_kind != ds.dataset_kind:
        raise TrainingError(f"model was trained on {cfg.dataset_kind}, dataset is {ds.dataset_kind}")
    model = build_model(cfg.model, seed=cfg.seed)
    import_weights(model, run / "weights.spwt")
    model.eval()
    preds = evaluate(model, ds, np.arange(len(ds)))
    ids, video_preds, _ = per_video(ds.video_ids, preds, ds.targets)
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(out, ids, video_preds)
    write_manifest(str(out) + ".manifest.json", "predict", cfg.to_dict(),
                   {"run": args.run, "dataset": args.dataset}, [out])
    print(f"wrote predictions for {len(ids)} videos to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = MetricsReport()
    for item in args.inputs:
        path = Path(item)
        if path.is_dir():
            path = path / "metrics.csv"
        if not path.is_file():
            raise FileNotFoundError(f"metrics file not found: {path}")
        report = report.merge(MetricsReport.from_csv(path.read_text()))
    out = _out_dir(args)
    table = report.render()
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "table.txt").write_text(table)
    write_manifest(out / "manifest.json", "report", {}, {f"input{i}": p for i, p in enumerate(args.inputs)},
                   [out / "metrics.csv", out / "table.txt"])
    print(table)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_corpus

    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    paths = make_corpus(out, n_videos=args.videos, seed=seed, n_frames=args.frames, size=args.size, raw=args.raw)
    config = {"videos": args.videos, "frames": args.frames, "size": args.size, "raw": args.raw, "seed": seed}
    write_manifest(out / "manifest.json", "synth", config, {}, [paths["labels"], paths["folds"]])
    print(f"wrote {args.videos} synthetic videos under {paths['videos']}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--out", help="output path or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="spermnet", description="Semen-analysis regression from microscopy video.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="build a D1 or D2 dataset file")
    p.add_argument("--videos", required=True, help="directory of videos (frame folders or .rgb24 streams)")
    p.add_argument("--labels", required=True, help="labels CSV")
    p.add_argument("--folds", help="fold CSV (video_id,fold)")
    p.add_argument("--kind", choices=KINDS, help="dataset kind (overrides config)")
    p.add_argument("--task", choices=TASKS, help="target task (overrides config)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("flow", parents=[common], help="render the flow between two images")
    p.add_argument("frame_a")
    p.add_argument("frame_b")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", parents=[common], help="train on a whole dataset")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", parents=[common], help="three-fold cross-validation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", help="fold CSV; defaults to the folds recorded at preprocessing")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", parents=[common], help="per-video predictions from a trained run")
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="merge cv outputs into one table")
    p.add_argument("inputs", nargs="+", help="cv output directories or metrics CSV files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic moving-dot corpus")
    p.add_argument("--videos", type=int, default=6)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--raw", action="store_true", help="write .rgb24 streams instead of PNG folders")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "kind", None) or getattr(args, "task", None):
        args.set = list(args.set or [])
        if args.kind:
            args.set.append(f'kind="{args.kind}"')
        if args.task:
            args.set.append(f'task="{args.task}"')
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"spermnet: numerical failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, *INPUT_ERRORS) as exc:
        print(f"spermnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"spermnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
