"""Non-parametric softmax keypoint loss, clutter loss and their per-image total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .banks import ClutterBank, KeypointBank
from .errors import ContractError

AGGREGATIONS = ("mean", "sum")


@dataclass
class LossConfig:
    temperature: float = 0.7
    clutter_loss_weight: float = 1.0
    aggregation: str = "mean"  # mean over images of per-image sums, or plain sum

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.clutter_loss_weight < 0:
            raise ContractError("clutter_loss_weight must be >= 0")
        if self.aggregation not in AGGREGATIONS:
            raise ContractError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    keypoint_terms: torch.Tensor  # one per visible keypoint, ordered as keypoint_ids
    clutter_terms: torch.Tensor  # one per clutter sample
    keypoint_ids: tuple = ()

    def detached(self) -> "LossBreakdown":
        return LossBreakdown(self.total.detach(), self.keypoint_terms.detach(),
                             self.clutter_terms.detach(), self.keypoint_ids)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, KeypointBank):
        x = x.prototypes
    elif isinstance(x, ClutterBank):
        x = x.vectors()
    if x is None:
        x = np.empty((0, like.shape[-1] if like is not None else 0))
    t = x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))
    if like is not None:
        t = t.to(like.dtype)
    return t


def distance_sq(u, v) -> float:
    """Squared L2 distance between unit vectors, ``2 (1 - u.v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, w in (("u", u), ("v", v)):
        if abs(np.linalg.norm(w) - 1.0) > 1e-3:
            raise ContractError(f"{name} is not unit norm")
    return 2.0 * (1.0 - float(u @ v))


def keypoint_logits(features: torch.Tensor, prototypes: torch.Tensor, clutter: torch.Tensor,
                    temperature: float) -> torch.Tensor:
    bank = torch.cat([prototypes, clutter], dim=0) if clutter.numel() else prototypes
    return features @ bank.T / temperature


def keypoint_losses(features: torch.Tensor, targets, prototypes, clutter, temperature: float) -> torch.Tensor:
    """Vectorized keypoint loss for an (n, D) stack of features."""
    prototypes = _as_tensor(prototypes, features)
    clutter = _as_tensor(clutter, features)
    if prototypes.shape[0] == 0:
        raise ContractError("keypoint bank is empty")
    if features.shape[0] == 0:
        return features.new_zeros(0)
    targets = torch.as_tensor(targets, dtype=torch.long)
    logits = keypoint_logits(features, prototypes, clutter, temperature)
    return F.cross_entropy(logits, targets, reduction="none")


def keypoint_loss(f, target: int, kp_bank, clutter_bank=None, temperature: float = 0.7):
    """-log softmax probability of the target prototype among prototypes and clutter.

    Returns a float for array input, a tensor for tensor input.
    """
    is_tensor = torch.is_tensor(f)
    f_t = f if is_tensor else torch.as_tensor(np.asarray(f, dtype=np.float64))
    prototypes = _as_tensor(kp_bank, f_t)
    clutter = _as_tensor(clutter_bank, f_t)
    if prototypes.shape[0] == 0:
        raise ContractError("keypoint bank is empty")
    if not 0 <= target < prototypes.shape[0]:
        raise ContractError(f"target {target} outside bank of {prototypes.shape[0]}")
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    logits = keypoint_logits(f_t[None], prototypes, clutter, temperature)[0]
    top = logits.max().detach()
    loss = top + torch.log(torch.exp(logits - top).sum()) - logits[target]
    return loss if is_tensor else float(loss)


def clutter_loss(f_c, kp_bank):
    """Sum of similarities between a clutter feature and every prototype."""
    is_tensor = torch.is_tensor(f_c)
    f_t = f_c if is_tensor else torch.as_tensor(np.asarray(f_c, dtype=np.float64))
    prototypes = _as_tensor(kp_bank, f_t)
    if prototypes.shape[0] == 0:
        raise ContractError("keypoint bank is empty")
    loss = (f_t @ prototypes.T).sum(dim=-1)
    return loss if is_tensor else float(loss)


def total_loss(feature_map: torch.Tensor, keypoint_cells: dict, clutter_cells, kp_bank, clutter_bank,
               config: LossConfig | None = None) -> LossBreakdown:
    """Per-image loss: keypoint terms over visible keypoints plus weighted clutter terms.

    ``feature_map`` is (H, W, D); cells are ``(col, row)``.
    """
    config = config or LossConfig()
    if not torch.is_tensor(feature_map):
        feature_map = torch.as_tensor(np.asarray(feature_map))
    kp_set = set(map(tuple, keypoint_cells.values()))
    clutter_cells = [tuple(c) for c in clutter_cells]
    if kp_set.intersection(clutter_cells):
        raise ContractError("clutter cell coincides with a keypoint cell")
    height, width = feature_map.shape[:2]
    for col, row in [*kp_set, *clutter_cells]:
        if not (0 <= col < width and 0 <= row < height):
            raise ContractError(f"cell {(col, row)} outside {width}x{height} feature map")

    ids = tuple(sorted(keypoint_cells))
    kp_rows = torch.as_tensor([keypoint_cells[k][1] for k in ids], dtype=torch.long)
    kp_cols = torch.as_tensor([keypoint_cells[k][0] for k in ids], dtype=torch.long)
    kp_feats = feature_map[kp_rows, kp_cols]
    kp_terms = keypoint_losses(kp_feats, list(ids), kp_bank, clutter_bank, config.temperature)

    c_rows = torch.as_tensor([c[1] for c in clutter_cells], dtype=torch.long)
    c_cols = torch.as_tensor([c[0] for c in clutter_cells], dtype=torch.long)
    c_feats = feature_map[c_rows, c_cols]
    prototypes = _as_tensor(kp_bank, feature_map)
    c_terms = (c_feats @ prototypes.T).sum(dim=-1) if len(clutter_cells) else feature_map.new_zeros(0)

    total = kp_terms.sum() + config.clutter_loss_weight * c_terms.sum()
    return LossBreakdown(total, kp_terms, c_terms, ids)


def aggregate(breakdowns, config: LossConfig | None = None) -> torch.Tensor:
    config = config or LossConfig()
    totals = torch.stack([b.total for b in breakdowns])
    return totals.mean() if config.aggregation == "mean" else totals.sum()
