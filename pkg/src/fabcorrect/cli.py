"""Command-line entry point: data generation, training, segmentation, correction and evaluation.

Every command reads an optional JSON run config (``--config``) whose sections
mirror the module dataclasses::

    {"seed": 0,
     "data": {"n_per_family": 10, "canvas": 64, "families": [...]},
     "fab": {...FabParams}, "sem": {...SemRenderParams} or null,
     "augment": {...AugmentConfig} or null,
     "model": {...UNetConfig}, "train": {...TrainConfig},
     "canny": {...CannyParams}, "segment": {"patch": 128},
     "eval": {"variants": [{"name": "unet", "use_attention_gates": false}]}}

Missing keys take their defaults; ``--seed`` overrides every seed. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad_check, sigmoid, weighted_sum
from .autodiff import conv2d, maxpool2x2, relu, upsample2x
from .classical import CannyParams, segment_threshold
from .data import (
    FAMILIES,
    AugmentConfig,
    Tile,
    augment_all,
    build_benchmark,
    load_dataset,
    patchify,
    save_dataset,
    split_and_shuffle,
    stitch,
)
from .errors import (
    CheckpointFormatError,
    ContractError,
    FabCorrectError,
    FormatError,
    GdsError,
    InvalidShapeError,
    LayoutRangeError,
    NumericError,
)
from .fab import FabParams, SemRenderParams, fabricate
from .layout import PolySet, png_read, png_write, rasterize, read_gds, vectorize, write_gds
from .losses import iou, median_of_runs, summarize, summary_row, write_summary_csv
from .models import UNetConfig, build_model, checkpoint_hash, load_checkpoint, save_checkpoint
from .train import PRESETS, SchedulerConfig, TrainConfig, train

log = logging.getLogger("fabcorrect")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "data": {"n_per_family": 10, "canvas": 64, "families": list(FAMILIES)},
    "fab": asdict(FabParams()),
    "sem": None,
    "augment": None,
    "model": asdict(UNetConfig(depth=3, base_filters=8)),
    "train": {},
    "canny": asdict(CannyParams()),
    "segment": {"patch": 128},
    "eval": {
        "variants": [
            {"name": "unet", "use_attention_gates": False},
            {"name": "attention_unet", "use_attention_gates": True},
        ]
    },
}


class ConfigError(FabCorrectError):
    pass


class DataError(FabCorrectError):
    pass


# -- configuration ----------------------------------------------------------------
def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, dict) and isinstance(base[k], dict) and k not in ("train",):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def load_run_config(path: str | None, seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, raw)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _build(kind, section: dict | None, seed: int | None = None):
    if section is None:
        return None
    d = dict(section)
    if seed is not None and "seed" in {f for f in kind.__dataclass_fields__}:
        d["seed"] = seed
    try:
        return kind(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind.__name__} config: {exc}") from exc


def fab_params(cfg) -> FabParams:
    return _build(FabParams, cfg["fab"], cfg["seed"])


def unet_config(cfg, **override) -> UNetConfig:
    d = {**cfg["model"], **override}
    return _build(UNetConfig, d)


def train_config(cfg, task: str) -> TrainConfig:
    base = PRESETS[task].to_dict() if task in PRESETS else {"task": task}
    d = {**base, **cfg["train"], "task": task, "seed": cfg["seed"]}
    if isinstance(d.get("scheduler"), dict):
        d["scheduler"] = asdict(_build(SchedulerConfig, d["scheduler"]))
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


# -- helpers -------------------------------------------------------------------------
def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _inputs(paths, suffixes=(".png",)) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in suffixes)
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"input {p} does not exist")
    if not files:
        raise DataError("no input files found")
    return files


def _load_model(path):
    if not path:
        raise ConfigError("this command needs --checkpoint")
    try:
        return load_checkpoint(path)
    except CheckpointFormatError as exc:
        raise DataError(str(exc)) from exc


def predict_full(model, image: np.ndarray, patch: int) -> np.ndarray:
    """Probability map for a 2-D input of any size via padded tiles."""
    step = 2 ** (model.config.depth - 1)
    patch = max(step, patch - patch % step)
    h, w = image.shape
    if h < patch and w < patch:
        # one padded tile is enough; keep it as small as the network allows
        patch = max(-(-h // step), -(-w // step)) * step
        if (h, w) != (patch, patch):
            warnings.warn(f"input {h}x{w} is padded to one {patch}x{patch} tile", stacklevel=2)
    tiles = patchify(image.astype(np.float32), patch, fill=0.0)
    batch = np.stack([t.data for t in tiles])[:, None]
    probs = np.concatenate([model.predict(batch[k : k + 8]) for k in range(0, len(batch), 8)])
    out_tiles = [Tile(t.row, t.col, t.y, t.x, probs[k, 0], t.pad_bottom, t.pad_right) for k, t in enumerate(tiles)]
    return stitch(out_tiles, (h, w))


def _read_design(path: Path, cfg) -> tuple[np.ndarray, dict]:
    """Design raster plus what is needed to write it back as layout."""
    if path.suffix.lower() == ".gds":
        try:
            sets = read_gds(path.read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if not sets:
            raise DataError(f"{path} holds no polygons")
        pts = np.array([p for ps in sets for ring in ps.polygons for p in ring])
        (x0, y0), (x1, y1) = pts.min(axis=0).tolist(), pts.max(axis=0).tolist()
        canvas = int(cfg["data"]["canvas"])
        # centre the bounding box on a canvas-multiple raster with some margin
        w = -(-(x1 - x0 + 8) // canvas) * canvas
        h = -(-(y1 - y0 + 8) // canvas) * canvas
        origin = (x0 - (w - (x1 - x0)) // 2, y0 - (h - (y1 - y0)) // 2)
        mask = rasterize(sets, (h, w), origin, 1.0)
        meta = {"origin": origin, "layer": sets[0].layer, "datatype": sets[0].datatype, "dbu_nm": sets[0].dbu_nm}
        return mask, meta
    return png_read(path, as_mask=True), {"origin": (0, 0), "layer": 1, "datatype": 0, "dbu_nm": 1.0}


def _panel(images: list[np.ndarray], gap: int = 4) -> np.ndarray:
    h = max(i.shape[0] for i in images)
    cols = []
    for k, img in enumerate(images):
        g = np.full((h, img.shape[1]), 128, dtype=np.uint8)
        g[: img.shape[0]] = np.where(img, 255, 0).astype(np.uint8) if img.dtype == bool else img
        cols.append(g)
        if k < len(images) - 1:
            cols.append(np.full((h, gap), 128, dtype=np.uint8))
    return np.concatenate(cols, axis=1)


# -- commands ------------------------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    data = cfg["data"]
    sem = _build(SemRenderParams, cfg["sem"])
    pairs = build_benchmark(
        int(data["n_per_family"]), int(data["canvas"]), fab_params(cfg), seed=cfg["seed"],
        sem_params=sem, families=tuple(data.get("families", FAMILIES)),
    )
    aug = _build(AugmentConfig, cfg["augment"], cfg["seed"])
    if aug is not None:
        pairs = augment_all(pairs, aug)
    digest = save_dataset(pairs, _out_dir(args.out))
    print(f"pairs {len(pairs)}")
    print(f"dataset_hash {digest}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    task = args.task
    pairs = load_dataset(args.data)
    tcfg = train_config(cfg, task)
    attention = task in ("corrector", "tandem") if args.attention is None else args.attention
    if args.init_checkpoint:
        model = _load_model(args.init_checkpoint)
    else:
        model = build_model(unet_config(cfg, use_attention_gates=attention))
    predictor = None
    before = None
    if task == "tandem":
        predictor = _load_model(args.predictor_checkpoint)
        before = checkpoint_hash(predictor)
        print(f"predictor_hash_before {before}")
    out = _out_dir(args.out)
    model, run_log = train(task, model, pairs, tcfg, predictor=predictor, checkpoint_dir=out, resume=args.resume)
    run_log.write_csv(out / "runlog.csv")
    (out / "runlog.json").write_text(json.dumps(run_log.to_dict(), indent=1))
    if predictor is not None:
        after = checkpoint_hash(predictor)
        print(f"predictor_hash_after {after}")
        if after != before:
            raise NumericError("predictor changed during tandem training")
    best = run_log.epochs[run_log.best_epoch - 1] if run_log.best_epoch else run_log.epochs[-1]
    print(f"stop_reason {run_log.stop_reason}")
    print(f"best_epoch {run_log.best_epoch} val_loss {best.val_loss:.6f} val_iou {best.val_iou:.6f}")
    print(f"checkpoint {out / 'best.ckpt'} {checkpoint_hash(model)}")
    return EXIT_OK


def cmd_segment(args, cfg) -> int:
    files = _inputs(args.inputs)
    out = _out_dir(args.out)
    model = _load_model(args.checkpoint) if args.method == "unet" else None
    canny = _build(CannyParams, cfg["canny"])
    truth_dir = Path(args.truth) if args.truth else None
    rows = []
    for f in files:
        img = png_read(f)
        if img.ndim != 2:
            raise DataError(f"{f} is not a grayscale image")
        if model is None:
            mask = segment_threshold(img, canny)
        else:
            mask = predict_full(model, img / 255.0, int(cfg["segment"]["patch"])) >= 0.5
        png_write(out / f"{f.stem}_mask.png", mask)
        row = {"file": f.name, "method": args.method, "iou": ""}
        if truth_dir is not None:
            t = truth_dir / f.name if truth_dir.is_dir() else truth_dir
            if t.is_file():
                row["iou"] = f"{iou(mask, png_read(t, as_mask=True)):.6f}"
                print(f"{f.name} iou {row['iou']}")
        rows.append(row)
    with open(out / "segment_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["file", "method", "iou"])
        w.writeheader()
        w.writerows(rows)
    print(f"masks {len(rows)}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    model = _load_model(args.checkpoint)
    out = _out_dir(args.out)
    for f in _inputs(args.inputs, (".png", ".gds")):
        design, _ = _read_design(f, cfg)
        prob = predict_full(model, design.astype(np.float32), int(cfg["segment"]["patch"]))
        png_write(out / f"{f.stem}_predicted.png", prob >= 0.5)
        png_write(out / f"{f.stem}_probability.png", np.rint(prob * 255).astype(np.uint8))
        print(f"{f.name} predicted silicon fraction {(prob >= 0.5).mean():.4f}")
    return EXIT_OK


def correct_design(design: np.ndarray, corrector, fab: FabParams, patch: int, predictor=None) -> dict:
    """Corrected mask plus before/after scores against the fabrication model."""
    corrected = predict_full(corrector, design.astype(np.float32), patch) >= 0.5
    fab_before = fabricate(design, fab)
    fab_after = fabricate(corrected, fab)
    result = {
        "corrected": corrected,
        "fab_before": fab_before,
        "fab_after": fab_after,
        "iou_before": iou(fab_before, design),
        "iou_after": iou(fab_after, design),
    }
    if predictor is not None:
        predicted = predict_full(predictor, corrected.astype(np.float32), patch) >= 0.5
        result["predicted_after"] = predicted
        result["iou_predicted_after"] = iou(predicted, design)
    return result


def cmd_correct(args, cfg) -> int:
    corrector = _load_model(args.checkpoint)
    predictor = _load_model(args.predictor_checkpoint) if args.predictor_checkpoint else None
    out = _out_dir(args.out)
    fab = fab_params(cfg)
    reports = []
    for f in _inputs(args.inputs, (".png", ".gds")):
        design, meta = _read_design(f, cfg)
        res = correct_design(design, corrector, fab, int(cfg["segment"]["patch"]), predictor)
        ps = vectorize(
            res["corrected"], layer=meta["layer"], datatype=meta["datatype"],
            dbu_nm=meta["dbu_nm"], origin=meta["origin"],
        )
        gds = write_gds([ps])
        (out / f"{f.stem}_corrected.gds").write_bytes(gds)
        check = rasterize(read_gds(gds), design.shape, meta["origin"], 1.0)
        if not np.array_equal(check, res["corrected"]):
            raise DataError("corrected layout does not rasterize back to the corrected mask")
        panels = [design, res["corrected"], res["fab_after"]]
        if "predicted_after" in res:
            panels.append(res["predicted_after"])
        png_write(out / f"{f.stem}_panels.png", _panel(panels))
        png_write(out / f"{f.stem}_corrected.png", res["corrected"])
        rep = {
            "file": f.name,
            "iou_before": res["iou_before"],
            "iou_after": res["iou_after"],
            "gain": res["iou_after"] - res["iou_before"],
            "polygons": len(ps.polygons),
            "origin": list(meta["origin"]),
            "shape": list(design.shape),
        }
        if "iou_predicted_after" in res:
            rep["iou_predicted_after"] = res["iou_predicted_after"]
        reports.append(rep)
        print(
            f"{f.name} iou_before {rep['iou_before']:.4f} iou_after {rep['iou_after']:.4f}"
            f" gain {rep['gain']:+.4f}"
        )
    (out / "correction_report.json").write_text(json.dumps(reports, indent=1))
    return EXIT_OK


def _score(task, model, pairs, fab, predictor=None) -> list[float]:
    scores = []
    for p in pairs:
        if task == "segmentation":
            pred = model.predict((p.sem / 255.0).astype(np.float32)[None, None])[0, 0] >= 0.5
            scores.append(iou(pred, p.fabricated))
        elif task == "predictor":
            pred = model.predict(p.design.astype(np.float32)[None, None])[0, 0] >= 0.5
            scores.append(iou(pred, p.fabricated))
        else:
            corrected = model.predict(p.design.astype(np.float32)[None, None])[0, 0] >= 0.5
            scores.append(iou(fabricate(corrected, fab), p.design))
    return scores


def cmd_eval(args, cfg) -> int:
    task = args.task
    pairs = load_dataset(args.data)
    fab = fab_params(cfg)
    rows, per_variant = [], {}
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        split = split_and_shuffle(pairs, train_config(cfg, task).val_fraction, cfg["seed"])
        s = summarize(_score(task, model, split.val, fab))
        row = summary_row("checkpoint", Path(args.checkpoint).stem, s)
        row["params"] = model.parameter_count()
        rows.append(row)
    else:
        for r in range(args.runs):
            seed = cfg["seed"] + r
            run_cfg = {**cfg, "seed": seed}
            tcfg = train_config(run_cfg, task)
            split = split_and_shuffle(pairs, tcfg.val_fraction, seed)
            predictor = None
            if task == "tandem":
                predictor = build_model(unet_config(run_cfg, use_attention_gates=False, seed=seed))
                train("predictor", predictor, split, train_config(run_cfg, "predictor"))
            if task == "segmentation":
                canny = _build(CannyParams, cfg["canny"])
                s = summarize([iou(segment_threshold(p.sem, canny), p.fabricated) for p in split.val])
                per_variant.setdefault("threshold", []).append(s)
                rows.append({**summary_row(f"run{r}", "threshold", s), "params": 0})
            for variant in cfg["eval"]["variants"]:
                v = dict(variant)
                name = v.pop("name")
                model = build_model(unet_config(run_cfg, seed=seed, **v))
                train(task, model, split, tcfg, predictor=predictor)
                s = summarize(_score(task, model, split.val, fab))
                per_variant.setdefault(name, []).append(s)
                rows.append({**summary_row(f"run{r}", name, s), "params": model.parameter_count()})
                print(f"run {r} {name} avg {s.average_iou:.4f} median {s.median_iou:.4f}")
        if args.runs > 1:
            for name, runs in per_variant.items():
                params = next(x["params"] for x in rows if x["model"] == name)
                rows.append({**summary_row("median", name, median_of_runs(runs)), "params": params})
    out = _out_dir(args.out)
    write_summary_csv(out / "metrics.csv", rows, extra_columns=["params"])
    print(f"rows {len(rows)} -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    rng = np.random.default_rng(cfg["seed"])

    def param(shape, name):
        return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)

    def proj(shape):
        return rng.standard_normal(shape)

    w, b = param((2, 1, 3, 3), "w"), param((2,), "b")
    checks = {
        "conv2d": (lambda p=proj((1, 2, 6, 6)): ({"w": w, "b": b}, lambda x: weighted_sum(conv2d(x, w, b), p)), (1, 1, 6, 6)),
        "relu": (lambda p=proj((1, 2, 4, 4)): ({}, lambda x: weighted_sum(relu(x), p)), (1, 2, 4, 4)),
        "sigmoid": (lambda p=proj((1, 2, 4, 4)): ({}, lambda x: weighted_sum(sigmoid(x), p)), (1, 2, 4, 4)),
        "maxpool2x2": (lambda p=proj((1, 1, 2, 2)): ({}, lambda x: weighted_sum(maxpool2x2(x), p)), (1, 1, 4, 4)),
        "upsample2x": (lambda p=proj((1, 1, 4, 4)): ({}, lambda x: weighted_sum(upsample2x(x), p)), (1, 1, 2, 2)),
    }
    model = build_model(UNetConfig(depth=2, base_filters=4, use_attention_gates=True, seed=cfg["seed"]))
    p16 = proj((1, 1, 16, 16))
    checks["attention_unet"] = (lambda: (model.params, lambda x: weighted_sum(model.forward(x), p16)), (1, 1, 16, 16))
    failed = 0
    for name, (builder, shape) in checks.items():
        kw = {"max_entries": args.max_entries} if name == "attention_unet" else {}
        report = grad_check(builder, shape, seed=cfg["seed"], **kw)
        print(f"{name}: {'PASS' if report.passed else 'FAIL'} max_rel_err {report.max_rel_error:.2e}")
        if args.verbose or not report.passed:
            for line in report.lines():
                print("  " + line)
        failed += not report.passed
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fabcorrect", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    p = common(sub.add_parser("gen-data", help="build and save the synthetic benchmark"))
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a model on a saved dataset"))
    p.add_argument("task", choices=("segmentation", "predictor", "corrector", "tandem"))
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--predictor-checkpoint", help="trained predictor (tandem only)")
    p.add_argument("--init-checkpoint", help="start from these weights instead of a fresh model")
    p.add_argument("--resume", action="store_true", help="continue from the state in --out")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--attention", dest="attention", action="store_true", default=None,
                   help="use attention gates (default for corrector and tandem)")
    g.add_argument("--no-attention", dest="attention", action="store_false", help="plain U-Net")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("segment", help="segment SEM images into masks"))
    p.add_argument("inputs", nargs="+", help="PNG files or directories")
    p.add_argument("--method", choices=("unet", "threshold"), default="threshold")
    p.add_argument("--checkpoint", help="segmentation model (method unet)")
    p.add_argument("--truth", help="ground-truth mask PNG or directory of same-named PNGs")
    p.set_defaults(func=cmd_segment)

    p = common(sub.add_parser("predict", help="predict fabricated shapes from designs"))
    p.add_argument("inputs", nargs="+", help="design PNG/GDS files or directories")
    p.add_argument("--checkpoint", required=True, help="predictor model")
    p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("correct", help="pre-distort designs and report the gain"))
    p.add_argument("inputs", nargs="+", help="design PNG/GDS files or directories")
    p.add_argument("--checkpoint", required=True, help="corrector model")
    p.add_argument("--predictor-checkpoint", help="predictor for the simulated panel")
    p.set_defaults(func=cmd_correct)

    p = common(sub.add_parser("eval", help="train/evaluate over several seeds"))
    p.add_argument("task", choices=("segmentation", "predictor", "corrector", "tandem"))
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--runs", type=int, default=5, help="independent seeds per variant")
    p.add_argument("--checkpoint", help="evaluate this model instead of training")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine"), out_required=False)
    p.add_argument("--max-entries", type=int, default=6, help="entries per U-Net tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config, args.seed)
        if getattr(args, "runs", 1) < 1:
            raise ConfigError("--runs must be >= 1")
        return args.func(args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, GdsError, LayoutRangeError, InvalidShapeError, CheckpointFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
