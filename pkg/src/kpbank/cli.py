"""Command line entry point: ``kpbank {generate,train,eval,infer,oracle-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .banks import ClutterBank, KeypointBank
from .config import RunConfig, load_config
from .errors import ConfigError, DataIOError, KpBankError, ToleranceError
from .evaluation import evaluate, records_from_predictions
from .inference import (detections_from_scores, feature_maps, prediction_record, read_predictions, score_maps,
                        write_predictions)
from .oracle import FeatureCorpus, approximation_report, epoch_average_prototypes
from .synthetic import dataset_checksum, generate_split, occluded_copies, read_dataset, write_dataset
from .trainer import collect_features, fit, load_checkpoint

log = logging.getLogger("kpbank")

# distinct colors per keypoint id for overlays
PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
], dtype=np.uint8)


def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"{what} not set; pass it via --set paths.{what}=... or the [paths] section")
    return value


def _splits(data: Path) -> list[Path]:
    """A dataset directory itself, or its ``test_lv*`` sub-datasets."""
    if (data / "manifest.jsonl").exists():
        return [data]
    found = sorted(p for p in data.glob("test_lv*") if (p / "manifest.jsonl").exists())
    if not found:
        raise DataIOError(f"{data}: no manifest.jsonl and no test_lv* splits")
    return found


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out: Path) -> dict:
    gen, plan = cfg.generator, cfg.generate
    train = generate_split(gen, plan.train_count, "train")
    test = generate_split(gen, plan.test_count, "test", start=plan.test_start)
    written = {"train": write_dataset(train, out / "train")}
    for level in plan.levels:
        scenes = test if level == 0 else occluded_copies(test, level, plan.occlusion_seed)
        written[f"test_lv{level}"] = write_dataset(scenes, out / f"test_lv{level}")
    checksums = {name: dataset_checksum(path) for name, path in written.items()}
    (out / "checksums.json").write_text(json.dumps(checksums, indent=2) + "\n")
    return checksums


def cmd_train(cfg: RunConfig, out: Path) -> list[dict]:
    data = Path(_require(cfg.paths.data, "data"))
    train_dir = data / "train" if (data / "train" / "manifest.jsonl").exists() else data
    scenes = read_dataset(train_dir)
    resume = cfg.paths.checkpoint or None
    _, metrics = fit(scenes, cfg.train, run_dir=out, resume_from=resume)
    return metrics


def _predict_scenes(state, scenes, batch_size: int):
    h, w = scenes[0].image.shape[:2]
    spec = state.model.config.grid_spec(h, w)
    fmaps = feature_maps([s.image for s in scenes], state.model, batch_size)
    scores = [score_maps(f, state.kp_bank) for f in fmaps]
    return [detections_from_scores(s, spec) for s in scores], scores


def cmd_eval(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "data"))
    scenes = [s for split in _splits(data) for s in read_dataset(split)]
    if cfg.paths.predictions:
        preds = read_predictions(cfg.paths.predictions)
        missing = [s.scene_id for s in scenes if s.scene_id not in preds]
        if missing:
            raise DataIOError(f"{cfg.paths.predictions}: no predictions for {len(missing)} scenes, e.g. {missing[0]}")
        records = records_from_predictions(scenes, preds)
    else:
        state = load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
        dets, _ = _predict_scenes(state, scenes, cfg.infer.batch_size)
        records = records_from_predictions(scenes, dets)
    report = evaluate(records, cfg.eval.threshold)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    return report


def heatmap_pgm(scores: np.ndarray, stride: int) -> Image.Image:
    """Affine map of [-1, 1] scores to [0, 255], upsampled to pixel resolution."""
    gray = np.round((np.clip(scores, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    return Image.fromarray(np.kron(gray, np.ones((stride, stride), dtype=np.uint8)), "L")


def overlay_ppm(image: np.ndarray, detections, annotations) -> Image.Image:
    """Predictions as filled dots, ground truth as rings, one color per keypoint."""
    canvas = np.round(np.asarray(image) * 255.0).astype(np.uint8).copy()
    h, w = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    for a in annotations:
        d2 = (xx + 0.5 - a.x) ** 2 + (yy + 0.5 - a.y) ** 2
        canvas[(d2 >= 2.0**2) & (d2 <= 3.0**2)] = PALETTE[a.keypoint_id % len(PALETTE)]
    for d in detections:
        d2 = (xx + 0.5 - d.x) ** 2 + (yy + 0.5 - d.y) ** 2
        canvas[d2 <= 1.5**2] = PALETTE[d.keypoint_id % len(PALETTE)]
    return Image.fromarray(canvas, "RGB")


def cmd_infer(cfg: RunConfig, out: Path) -> Path:
    data = Path(_require(cfg.paths.data, "data"))
    split = data if (data / "manifest.jsonl").exists() else data / cfg.infer.split
    scenes = read_dataset(split)
    state = load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
    dets, scores = _predict_scenes(state, scenes, cfg.infer.batch_size)
    path = out / "predictions.jsonl"
    write_predictions([prediction_record(s.scene_id, d) for s, d in zip(scenes, dets)], path)
    if cfg.infer.visualize > 0:
        (out / "heatmaps").mkdir(exist_ok=True)
        (out / "overlays").mkdir(exist_ok=True)
        for scene, det, stack in list(zip(scenes, dets, scores))[:cfg.infer.visualize]:
            for k in range(stack.shape[-1]):
                heatmap_pgm(stack[..., k], state.model.stride).save(
                    out / "heatmaps" / f"{scene.scene_id}_kp{k}.pgm", format="PPM")
            overlay_ppm(scene.image, det, scene.annotations).save(
                out / "overlays" / f"{scene.scene_id}.ppm", format="PPM")
    return path


def _angle_deg(u, v) -> float:
    return math.degrees(math.acos(float(np.clip(np.dot(u, v), -1.0, 1.0))))


def cmd_oracle_check(cfg: RunConfig, out: Path) -> dict:
    """Compare bank approximations with exact sums on features of a frozen extractor."""
    data = Path(_require(cfg.paths.data, "data"))
    train_dir = data / "train" if (data / "train" / "manifest.jsonl").exists() else data
    scenes = read_dataset(train_dir)[:cfg.oracle.num_scenes]
    state = load_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
    per_kp, groups = collect_features(state.model, scenes, cfg.train,
                                      rng=np.random.default_rng([cfg.train.seed, 30_000]))
    corpus = FeatureCorpus(per_kp, np.concatenate(groups))
    target = epoch_average_prototypes(corpus)

    # stationary corpus: every update sees the full per-keypoint feature set
    kp_bank = KeypointBank(state.kp_bank.prototypes.copy(), cfg.train.alpha)
    batch = dict(enumerate(corpus.keypoint_features))
    for _ in range(cfg.oracle.updates):
        kp_bank.update(batch)
    clutter_bank = ClutterBank(len(groups), groups[0].shape[0], corpus.clutter_features.shape[1])
    for g in groups:
        clutter_bank.insert(g)

    report = approximation_report(corpus, kp_bank, clutter_bank)
    angles = [_angle_deg(a, b) for a, b in zip(kp_bank.prototypes, target)]
    ex, ap = report.pairs("clutter")
    clutter_err = float(np.max(np.abs(ex - ap))) if len(ex) else 0.0
    checks = {
        "max_prototype_angle_deg": max(angles),
        "clutter_max_abs_error": clutter_err,
        "rank_correlation": report.rank_correlation,
    }
    failures = []
    if max(angles) >= cfg.oracle.angle_tol_deg:
        failures.append(f"prototype angle {max(angles):.4f} deg >= {cfg.oracle.angle_tol_deg}")
    if clutter_err > cfg.oracle.clutter_tol:
        failures.append(f"clutter approximation error {clutter_err:.3e} > {cfg.oracle.clutter_tol}")
    for obj in ("within", "between"):
        rho = report.rank_correlation.get(obj)
        if rho is not None and rho < cfg.oracle.min_rank_correlation:
            failures.append(f"{obj} rank correlation {rho:.4f} < {cfg.oracle.min_rank_correlation}")
    checks["failures"] = failures
    (out / "approximation.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary())
    (out / "checks.json").write_text(json.dumps(checks, indent=2) + "\n")
    if failures:
        raise ToleranceError("; ".join(failures))
    return checks


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpbank", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI file with [generator] [generate] [train] [eval] [infer] [oracle] [paths]")
    parser.add_argument("--seed", type=int, help="seed for generation and training")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--workers", type=int, default=1, help="cap on torch CPU threads")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value; repeatable; KEY is section.key or an unambiguous key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        torch.set_num_threads(args.workers)
        cfg = load_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        try:
            cfg.snapshot(out)
        except OSError as exc:
            raise DataIOError(f"cannot write to {out}: {exc}") from exc
        result = COMMANDS[args.command](cfg, out)
        if args.command == "eval":
            print(result.to_text(), end="")
        elif args.command == "oracle-check":
            print((out / "summary.txt").read_text(), end="")
        elif args.command == "generate":
            for name, digest in result.items():
                print(f"{name} {digest}")
        elif args.command == "infer":
            print(result)
        return 0
    except KpBankError as exc:
        print(f"kpbank {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kpbank {args.command}: I/O error: {exc}", file=sys.stderr)
        return DataIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
