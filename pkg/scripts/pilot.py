"""Desk-scale end-to-end run: generate, train, report PCK per occlusion level.

    python scripts/pilot.py [--epochs 30] [--set key=value ...]
"""

import argparse
import json
import time

import torch

from kpbank.config import load_config
from kpbank.evaluation import evaluate, records_from_predictions
from kpbank.inference import predict_batch
from kpbank.synthetic import generate_split, occluded_copies
from kpbank.trainer import fit


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default=None, help="optional run directory")
    args = parser.parse_args()
    torch.set_num_threads(args.workers)
    cfg = load_config(overrides=args.overrides)

    t0 = time.perf_counter()
    train = generate_split(cfg.generator, cfg.generate.train_count, "train")
    test = generate_split(cfg.generator, cfg.generate.test_count, "test", start=cfg.generate.test_start)
    print(f"generated {len(train)} train / {len(test)} test scenes in {time.perf_counter() - t0:.1f}s")

    t0 = time.perf_counter()
    state, metrics = fit(train, cfg.train, run_dir=args.out)
    print(f"trained {cfg.train.epochs} epochs in {time.perf_counter() - t0:.1f}s")
    for rec in metrics:
        print(json.dumps(rec))

    for level in cfg.generate.levels:
        scenes = test if level == 0 else occluded_copies(test, level, cfg.generate.occlusion_seed)
        report = evaluate(records_from_predictions(scenes, predict_batch([s.image for s in scenes], state.model,
                                                                         state.kp_bank)))
        per_kp = " ".join(f"{k}:{t.pck:.2f}" for k, t in sorted(report.per_keypoint.items()))
        print(f"Lv.{level} PCK {report.pck:.4f}  per keypoint {per_kp}")


if __name__ == "__main__":
    main()
