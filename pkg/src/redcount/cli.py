"""``redcount`` command line: generate, train, eval, predict, stride-ablation, describe.

Exit status: 0 success, 1 usage error (bad flags, refusing to overwrite, bad
stride), 2 runtime or numeric failure (unreadable data, divergence).

Every command that writes files also writes a ``run_manifest.json`` holding
the fully resolved configuration, so ``--config <that manifest>`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .countmap import CountGeometry, save_count_map_csv, save_count_map_png, subsample_stride, recover_count
from .datasets import (CountingDataset, GeneratorConfig, Split, SplitSpec, baseline_average_count, center_crop,
                       default_test_size, generate_synthetic, load_dataset, make_splits, read_image, save_dataset)
from .network import build_countception, countception_spec
from .trainer import (DivergenceError, TrainConfig, atomic_write_bytes, evaluate_mae, load_checkpoint,
                      mae_from_counts, oracle_model, predict_maps, train)

log = logging.getLogger("redcount")

MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    code_version: str = __version__
    outputs: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    argv: list = field(default_factory=list)
    environment: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__, "kernels": _backend_name()})

    def write(self, path) -> None:
        atomic_write_bytes(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())


def _backend_name() -> str:
    from .kernels import backend_name

    return backend_name()


class _Clock:
    def __enter__(self):
        self.start = datetime.now(timezone.utc)
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0

    def record(self) -> dict:
        return {"started": self.start.isoformat(timespec="seconds"), "seconds": round(time.perf_counter() - self.t0, 3)}


# ------------------------------------------------------------------ config helpers


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if "command" in data and "config" in data:  # a run manifest
        data = data["config"]
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _resolve(args, defaults: dict, config: dict) -> dict:
    """defaults < config file < explicitly given flags."""
    unknown = set(config) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    out = dict(defaults)
    out.update(config)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _prepare_output(path: Path, force: bool, is_dir: bool = True) -> Path:
    if path.exists():
        occupied = any(path.iterdir()) if path.is_dir() else True
        if occupied and not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if force and occupied:
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _parse_strides(text: str) -> list[int]:
    try:
        strides = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"strides must be comma separated integers, got {text!r}") from exc
    if not strides or min(strides) < 1:
        raise UsageError("strides must be positive")
    return strides


def _check_stride(s: int, r: int) -> None:
    if r % s:
        raise UsageError(f"stride {s} does not divide the receptive field {r}")


def _load_data(path) -> CountingDataset:
    ds = load_dataset(path)
    if len({img.shape for img in ds.images}) > 1:
        log.warning("images differ in size; center-cropping to the smallest")
        ds = center_crop(ds)
    return ds


def _seed_for(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, repeat]).generate_state(1)[0])


# ------------------------------------------------------------------------ generate

GENERATE_DEFAULTS = {**GeneratorConfig().to_dict(), "n_images": 20, "seed": 0, "format": "csv-dots",
                     "name": "synthetic"}


def cmd_generate(args) -> int:
    cfg = _resolve(args, GENERATE_DEFAULTS, _load_config(args.config))
    for lo, hi, key in (("radius_min", "radius_max", "radius_range"), ("blur_min", "blur_max", "blur_range"),
                        ("ellipticity_min", "ellipticity_max", "ellipticity_range")):
        a, b = getattr(args, lo), getattr(args, hi)
        if a is not None or b is not None:
            cur = list(cfg[key])
            cfg[key] = [a if a is not None else cur[0], b if b is not None else cur[1]]
    if args.no_overlap:
        cfg["overlap"] = False
    gen_keys = set(GeneratorConfig().to_dict())
    try:
        gcfg = GeneratorConfig.from_dict({k: v for k, v in cfg.items() if k in gen_keys})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_output(Path(args.out), args.force)
    with _Clock() as clock:
        ds = generate_synthetic(gcfg, cfg["n_images"], seed=cfg["seed"], name=cfg["name"])
        record = {**gcfg.to_dict(), "n_images": cfg["n_images"], "seed": cfg["seed"]}
        save_dataset(ds, out, annotation_format=cfg["format"], generator=record, force=True)
    counts = ds.counts()
    print(f"wrote {len(ds)} images to {out} (counts mean {counts.mean() if len(counts) else 0:.2f})")
    RunManifest("generate", cfg, cfg["seed"], outputs={"dataset": str(out)}, timing=clock.record(),
                argv=sys.argv[1:]).write(out / MANIFEST_NAME)
    return 0


# --------------------------------------------------------------------------- train

TRAIN_DEFAULTS = {**TrainConfig().to_dict(), "r": 32, "n_train": 8, "n_val": 8, "test_size": None,
                  "repeats": 1, "train_on": None, "val_on": None}


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    keys = set(TrainConfig().to_dict())
    return TrainConfig.from_dict({**{k: v for k, v in cfg.items() if k in keys}, "seed": seed})


def _plan_splits(ds: CountingDataset, cfg: dict) -> list[Split]:
    n = len(ds)
    if cfg["train_on"] is not None:
        k = cfg["train_on"]
        if not 1 <= k <= n:
            raise UsageError(f"--train-on {k} needs between 1 and {n}")
        idx = np.arange(k)
        if cfg["val_on"] not in (None, "same"):
            raise UsageError("--val-on only accepts 'same'")
        return [Split(train=idx, val=idx, test=idx)] * cfg["repeats"]
    test = cfg["test_size"] if cfg["test_size"] is not None else default_test_size(n)
    test = min(test, n - cfg["n_train"] - cfg["n_val"])
    try:
        return make_splits(n, SplitSpec(cfg["n_train"], cfg["n_val"], test, cfg["seed"]), cfg["repeats"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS, _load_config(args.config))
    try:
        base = _train_config(cfg, cfg["seed"])
        base.check_geometry(cfg["r"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = _load_data(args.dataset)
    splits = _plan_splits(ds, cfg)
    out = _prepare_output(Path(args.out), args.force)
    atomic_write_bytes(out / "splits.json", json.dumps([s.to_dict() for s in splits], indent=1).encode())
    outputs = {"splits": str(out / "splits.json"), "repeats": []}
    with _Clock() as clock:
        for i, split in enumerate(splits):
            seed_i = _seed_for(cfg["seed"], i)
            tcfg = _train_config(cfg, seed_i)
            spec, state = build_countception(cfg["r"], ds.channels, seed=seed_i)
            rdir = out / f"repeat_{i:02d}"
            rdir.mkdir()
            ckpt = rdir / "checkpoint.npz"

            def progress(rec, i=i):
                if rec.epoch % max(1, tcfg.max_epochs // 20) == 0 or rec.epoch == tcfg.max_epochs:
                    log.info("repeat %d epoch %d loss %.2f val_mae %s", i, rec.epoch, rec.loss, rec.val_mae)

            best, trace = train(ds.subset(split.train), ds.subset(split.val), spec, state, tcfg,
                                checkpoint_path=ckpt, progress=progress)
            trace.to_csv(rdir / "train_log.csv")
            line = f"repeat {i}: best epoch {trace.best_epoch}, val MAE {trace.best_val_mae:.4f}"
            if cfg["train_on"] is not None:
                train_mae = evaluate_mae((spec, best), ds.subset(split.train).images,
                                         ds.subset(split.train).annotations, CountGeometry(cfg["r"])).mae
                line += f", train count error {train_mae:.4f}"
            print(line)
            outputs["repeats"].append({"checkpoint": str(ckpt), "train_log": str(rdir / "train_log.csv"),
                                       "seed": seed_i, "best_epoch": trace.best_epoch,
                                       "best_val_mae": trace.best_val_mae})
    RunManifest("train", {**cfg, "dataset": str(args.dataset)}, cfg["seed"], outputs=outputs,
                timing=clock.record(), argv=sys.argv[1:]).write(out / MANIFEST_NAME)
    return 0


# ---------------------------------------------------------------------------- eval


def _eval_plan(args, ds: CountingDataset):
    """``[(split, checkpoint path or None)]`` from a run directory or explicit flags."""
    if args.run is not None:
        run = Path(args.run)
        try:
            splits = [Split.from_dict(d) for d in json.loads((run / "splits.json").read_text())]
        except OSError as exc:
            raise UsageError(f"{run} is not a training run directory: {exc}") from exc
        ckpts = [run / f"repeat_{i:02d}" / "checkpoint.npz" for i in range(len(splits))]
        return list(zip(splits, ckpts))
    n = len(ds)
    test = args.test_size if args.test_size is not None else default_test_size(n)
    test = min(test, n - args.n_train - args.n_val)
    try:
        splits = make_splits(n, SplitSpec(args.n_train, args.n_val, test, args.seed), args.repeats)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return [(s, Path(args.checkpoint) if args.checkpoint else None) for s in splits]


def _repeat_maes(ds: CountingDataset, plan, predictor: str, strides: list[int]) -> dict[int, list[float]]:
    results: dict[int, list[float]] = {s: [] for s in strides}
    cache = {}
    for split, ckpt in plan:
        train_ds, test_ds = ds.subset(split.train), ds.subset(split.test)
        if predictor == "baseline":
            mean = baseline_average_count(train_ds).mean_count
            mae = mae_from_counts([mean] * len(test_ds), test_ds.counts()).mae
            for s in strides:
                results[s].append(mae)
            continue
        if predictor == "oracle":
            r = 32 if ckpt is None else load_checkpoint(ckpt).spec.receptive_field
            maps = oracle_model(test_ds.annotations, r)(test_ds.images)
        else:
            if ckpt is None:
                raise UsageError("the network predictor needs --run or --checkpoint")
            if not ckpt.exists():
                raise FileNotFoundError(f"missing checkpoint {ckpt}")
            if ckpt not in cache:
                cache.clear()
                cache[ckpt] = load_checkpoint(ckpt)
            c = cache[ckpt]
            r = c.spec.receptive_field
            maps = predict_maps(c.state, c.spec, test_ds.images)
        for s in strides:
            _check_stride(s, r)
        for s in strides:
            res = evaluate_mae(lambda _imgs, m=maps: m, test_ds.images, test_ds.annotations, CountGeometry(r, s))
            results[s].append(res.mae)
    return results


def _write_csv(rows: list[list], header: list[str], path) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path is not None:
        atomic_write_bytes(path, buf.getvalue().encode())
    return buf.getvalue()


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def cmd_eval(args) -> int:
    ds = _load_data(args.dataset)
    plan = _eval_plan(args, ds)
    out = _prepare_output(Path(args.out), args.force, is_dir=False) if args.out else None
    with _Clock() as clock:
        maes = _repeat_maes(ds, plan, args.predictor, [args.stride])[args.stride]
    arr = np.array(maes)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    rows = [[i, len(split.test), _fmt(m), ""] for i, ((split, _), m) in enumerate(zip(plan, maes))]
    rows.append(["summary", len(plan[0][0].test), _fmt(float(arr.mean())), _fmt(std)])
    text = _write_csv(rows, ["repeat", "n_test", "mae", "mae_std"], out)
    sys.stdout.write(text)
    print(f"{args.predictor} MAE {arr.mean():.3f} +- {std:.3f} over {len(arr)} repeat(s)")
    if out is not None:
        RunManifest("eval", {k: v for k, v in vars(args).items() if k != "func"}, args.seed,
                    outputs={"metrics": str(out)}, timing=clock.record(),
                    argv=sys.argv[1:]).write(out.with_name(out.name + ".manifest.json"))
    return 0


def cmd_stride_ablation(args) -> int:
    strides = _parse_strides(args.strides)
    ds = _load_data(args.dataset)
    plan = _eval_plan(args, ds)
    out = _prepare_output(Path(args.out), args.force, is_dir=False) if args.out else None
    with _Clock() as clock:
        results = _repeat_maes(ds, plan, args.predictor, strides)
    rows = []
    for s in strides:
        arr = np.array(results[s])
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append([s, len(arr), _fmt(float(arr.mean())), _fmt(std)])
    sys.stdout.write(_write_csv(rows, ["stride", "n_repeats", "mae", "mae_std"], out))
    if out is not None:
        RunManifest("stride-ablation", {k: v for k, v in vars(args).items() if k != "func"}, args.seed,
                    outputs={"table": str(out)}, timing=clock.record(),
                    argv=sys.argv[1:]).write(out.with_name(out.name + ".manifest.json"))
    return 0


# ------------------------------------------------------------------------- predict


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    r = ckpt.spec.receptive_field
    _check_stride(args.stride, r)
    image = read_image(args.image)
    if image.shape[0] != ckpt.spec.in_channels:
        raise UsageError(f"image has {image.shape[0]} channel(s), network expects {ckpt.spec.in_channels}")
    out = _prepare_output(Path(args.out_dir), args.force)
    stem = Path(args.image).name.split(".")[0]
    geometry = CountGeometry(r, args.stride)
    with _Clock() as clock:
        cmap = subsample_stride(predict_maps(ckpt.state, ckpt.spec, [image])[0], args.stride)
        count = recover_count(cmap, geometry)
        csv_path = out / f"{stem}.countmap.csv"
        png_path = out / f"{stem}.heatmap.png"
        save_count_map_csv(cmap, csv_path)
        save_count_map_png(cmap, png_path)
    print(f"{count:.6f}")
    RunManifest("predict", {k: v for k, v in vars(args).items() if k != "func"}, None,
                outputs={"count": count, "count_map_csv": str(csv_path), "heatmap": str(png_path),
                         "heatmap_meta": str(png_path) + ".json", "map_shape": list(cmap.shape)},
                timing=clock.record(), argv=sys.argv[1:]).write(out / MANIFEST_NAME)
    return 0


def cmd_describe(args) -> int:
    spec = countception_spec(args.r, args.channels)
    print(spec.layer_table(args.input_size))
    return 0


# -------------------------------------------------------------------------- parser


def _add_split_flags(p) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--run", help="training run directory (uses its splits and per-repeat checkpoints)")
    src.add_argument("--checkpoint", help="a single checkpoint evaluated on freshly drawn splits")
    p.add_argument("--predictor", choices=("network", "baseline", "oracle"), default="network")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--test-size", type=int)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV file to write")
    p.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = _Parser(prog="redcount", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    g = sub.add_parser("generate", help="write a synthetic cell dataset")
    g.add_argument("out")
    g.add_argument("--n", dest="n_images", type=int)
    g.add_argument("--size", dest="image_size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--count-mean", type=float)
    g.add_argument("--count-spread", type=float)
    g.add_argument("--radius-min", type=float)
    g.add_argument("--radius-max", type=float)
    g.add_argument("--blur-min", type=float)
    g.add_argument("--blur-max", type=float)
    g.add_argument("--ellipticity-min", type=float)
    g.add_argument("--ellipticity-max", type=float)
    g.add_argument("--noise", dest="noise_level", type=float)
    g.add_argument("--no-overlap", action="store_true")
    g.add_argument("--format", choices=("csv-dots", "dot-image"))
    g.add_argument("--name", help="dataset name recorded in the manifest")
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on random splits of a dataset")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--n-train", type=int)
    t.add_argument("--n-val", type=int)
    t.add_argument("--test-size", type=int)
    t.add_argument("--repeats", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", dest="max_epochs", type=int)
    t.add_argument("--stride-train", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--stop-below", type=float, help="stop once validation MAE is below this")
    t.add_argument("--r", type=int)
    t.add_argument("--train-on", type=int, help="train on the first K images (overfit mode)")
    t.add_argument("--val-on", choices=("same",))
    t.add_argument("--config")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test MAE over split repeats")
    e.add_argument("dataset")
    e.add_argument("--stride", type=int, default=1)
    _add_split_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("stride-ablation", help="test MAE as a function of evaluation stride")
    a.add_argument("dataset")
    a.add_argument("--strides", default="1,8,16,32")
    _add_split_flags(a)
    a.set_defaults(func=cmd_stride_ablation)

    p = sub.add_parser("predict", help="count one image and export its count map")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    d = sub.add_parser("describe", help="print the network layer table")
    d.add_argument("--r", type=int, default=32)
    d.add_argument("--channels", type=int, default=1)
    d.add_argument("--input-size", type=int)
    d.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"redcount: error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, FloatingPointError) as exc:
        print(f"redcount: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"redcount: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
