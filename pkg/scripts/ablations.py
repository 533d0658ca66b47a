"""Clutter-source and prototype-update ablations on the level-0 synthetic test set.

Trains one model per variant with identical data and seeds and prints a
PCK table. ``--seeds 0 1 2`` averages over training seeds.

    python scripts/ablations.py --seeds 0 1 2
"""

import argparse
from dataclasses import replace

import numpy as np
import torch

from kpbank.config import load_config
from kpbank.evaluation import evaluate, records_from_predictions
from kpbank.inference import predict_batch
from kpbank.synthetic import generate_split
from kpbank.trainer import fit

VARIANTS = {
    "clutter bank": dict(clutter_mode="bank"),
    "image clutter only": dict(clutter_mode="image"),
    "no clutter": dict(clutter_mode="none"),
    "epoch average": dict(prototype_update="average"),
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    args = parser.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(overrides=args.overrides)
    train = generate_split(cfg.generator, cfg.generate.train_count, "train")
    test = generate_split(cfg.generator, cfg.generate.test_count, "test", start=cfg.generate.test_start)

    print(f"{'variant':<20} " + " ".join(f"seed{s:<4d}" for s in args.seeds) + "   mean")
    for name, change in VARIANTS.items():
        scores = []
        for seed in args.seeds:
            state, _ = fit(train, replace(cfg.train, seed=seed, **change))
            preds = predict_batch([s.image for s in test], state.model, state.kp_bank)
            scores.append(evaluate(records_from_predictions(test, preds)).pck)
        print(f"{name:<20} " + " ".join(f"{p:<8.4f}" for p in scores) + f" {np.mean(scores):.4f}", flush=True)


if __name__ == "__main__":
    main()
