"""Keypoint detection with prototypes used as 1x1 convolution kernels."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .banks import KeypointBank
from .errors import ContractError
from .extractor import FeatureExtractor, model_dtype, to_batch
from .geometry import GridSpec, grid_to_image


@dataclass(frozen=True)
class Detection:
    keypoint_id: int
    cell: tuple  # (col, row)
    x: float
    y: float
    score: float


def _prototypes(kp_bank) -> np.ndarray:
    return kp_bank.prototypes if isinstance(kp_bank, KeypointBank) else np.asarray(kp_bank)


def score_maps(feature_map, kp_bank) -> np.ndarray:
    """(H, W, K) stack of dot products between every feature vector and every prototype."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    protos = np.asarray(_prototypes(kp_bank), dtype=np.float64)
    if fmap.shape[-1] != protos.shape[-1]:
        raise ContractError(f"feature dim {fmap.shape[-1]} != prototype dim {protos.shape[-1]}")
    return fmap @ protos.T


def detect(scores: np.ndarray) -> list[tuple[tuple[int, int], float]]:
    """Per channel, the argmax cell as ``(col, row)`` and its score.

    Ties go to the lowest row-major index.
    """
    scores = np.asarray(scores)
    height, width, num = scores.shape
    flat = scores.reshape(height * width, num)
    best = np.argmax(flat, axis=0)  # first occurrence wins
    return [((int(i % width), int(i // width)), float(flat[i, k])) for k, i in enumerate(best)]


def detections_from_scores(scores: np.ndarray, spec: GridSpec) -> list[Detection]:
    out = []
    for k, (cell, score) in enumerate(detect(scores)):
        x, y = grid_to_image(cell, spec)
        out.append(Detection(k, cell, x, y, score))
    return out


def feature_maps(images, model: FeatureExtractor, batch_size: int = 32) -> np.ndarray:
    """(N, H, W, D) feature maps for a list of images."""
    out = []
    dtype = model_dtype(model)
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = to_batch(list(images[start:start + batch_size]), dtype)
            out.append(model(x).permute(0, 2, 3, 1).numpy())
    return np.concatenate(out) if out else np.empty((0,))


def predict(image, model: FeatureExtractor, kp_bank, spec: GridSpec | None = None) -> list[Detection]:
    """Detect every keypoint in one HxWx3 image; coordinates are in image pixels."""
    return predict_batch([image], model, kp_bank, spec)[0]


def predict_batch(images, model: FeatureExtractor, kp_bank, spec: GridSpec | None = None,
                  batch_size: int = 32) -> list[list[Detection]]:
    if len(images) == 0:
        return []
    h, w = np.asarray(images[0]).shape[:2]
    spec = spec or model.config.grid_spec(h, w)
    if spec.stride != model.stride:
        raise ContractError(f"grid stride {spec.stride} does not match extractor stride {model.stride}")
    protos = _prototypes(kp_bank)
    fmaps = feature_maps(images, model, batch_size)
    if fmaps.shape[1:3] != spec.shape:
        raise ContractError(f"feature map {fmaps.shape[1:3]} does not match grid {spec.shape}")
    return [detections_from_scores(score_maps(f, protos), spec) for f in fmaps]


def prediction_record(image_id: str, detections) -> dict:
    return {
        "id": image_id,
        "keypoints": [[d.keypoint_id, d.x, d.y, d.score] for d in detections],
    }


def write_predictions(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path) -> dict[str, dict]:
    """Map image id to ``{keypoint_id: (x, y, score)}``."""
    out = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out[rec["id"]] = {int(k): (float(x), float(y), float(s)) for k, x, y, s in rec["keypoints"]}
    return out
