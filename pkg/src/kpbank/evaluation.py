"""PCK@0.1 over visible keypoints, broken down by occlusion level and keypoint."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import ContractError, UndefinedMetricError

LEVELS = (0, 1, 2, 3)


@dataclass
class EvalRecord:
    image_id: str
    level: int
    predicted: list  # [(x, y)] indexed by keypoint id
    ground_truth: list  # [(x, y)]
    visible: list  # [bool]
    bbox_hw: tuple  # (h, w)

    def __post_init__(self):
        h, w = self.bbox_hw
        if not (h > 0 and w > 0):
            raise ContractError(f"{self.image_id}: bbox must be positive, got {self.bbox_hw}")


def pck_correct(pred, gt, h: float, w: float, threshold: float = 0.1) -> bool:
    """True iff the prediction lies strictly closer than ``threshold * max(h, w)``."""
    if not (h > 0 and w > 0):
        raise ContractError(f"bbox must be positive, got {(h, w)}")
    dist = math.hypot(pred[0] - gt[0], pred[1] - gt[1])
    return dist < threshold * max(h, w)


@dataclass
class Tally:
    visible: int = 0
    correct: int = 0

    @property
    def pck(self) -> float:
        if self.visible == 0:
            raise UndefinedMetricError("no visible keypoints")
        return self.correct / self.visible


@dataclass
class PCKReport:
    overall: Tally
    per_level: dict = field(default_factory=dict)
    per_keypoint: dict = field(default_factory=dict)

    @property
    def pck(self) -> float:
        return self.overall.pck

    def level_pck(self, level: int) -> float:
        return self.per_level[level].pck

    def rows(self):
        yield ("all", self.overall.visible, self.overall.correct, self.overall.pck)
        for level in sorted(self.per_level):
            t = self.per_level[level]
            yield (f"Lv.{level}", t.visible, t.correct, t.pck if t.visible else float("nan"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["level", "n_visible", "n_correct", "PCK"])
        for name, n_vis, n_cor, pck in self.rows():
            writer.writerow([name, n_vis, n_cor, f"{pck:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'level':<6} {'n_visible':>9} {'n_correct':>9} {'PCK':>7}"]
        for name, n_vis, n_cor, pck in self.rows():
            lines.append(f"{name:<6} {n_vis:>9d} {n_cor:>9d} {pck:>7.4f}")
        lines.append("")
        lines.append(f"{'keypoint':<8} {'n_visible':>9} {'PCK':>7}")
        for k in sorted(self.per_keypoint):
            t = self.per_keypoint[k]
            lines.append(f"{k:<8d} {t.visible:>9d} {(t.pck if t.visible else float('nan')):>7.4f}")
        return "\n".join(lines) + "\n"


def evaluate(records, threshold: float = 0.1, levels=LEVELS) -> PCKReport:
    """Pooled PCK over every visible keypoint of every record.

    Levels in ``levels`` always appear in the breakdown, possibly empty.
    """
    records = list(records)
    if not records:
        raise UndefinedMetricError("no records to evaluate")
    overall = Tally()
    per_level = {lv: Tally() for lv in levels}
    per_keypoint = defaultdict(Tally)
    for rec in records:
        h, w = rec.bbox_hw
        level = per_level.setdefault(rec.level, Tally())
        for k, (pred, gt, vis) in enumerate(zip(rec.predicted, rec.ground_truth, rec.visible)):
            if not vis:
                continue
            ok = pck_correct(pred, gt, h, w, threshold)
            for t in (overall, level, per_keypoint[k]):
                t.visible += 1
                t.correct += ok
    if overall.visible == 0:
        raise UndefinedMetricError("no visible keypoints in any record")
    return PCKReport(overall, per_level, dict(per_keypoint))


def records_from_predictions(scenes, predictions) -> list[EvalRecord]:
    """Pair scenes with detections (``list[Detection]`` per scene, or an id-keyed dict)."""
    out = []
    for i, scene in enumerate(scenes):
        if isinstance(predictions, dict):
            pred = predictions[scene.scene_id]
            coords = [pred[a.keypoint_id][:2] for a in scene.annotations]
        else:
            by_id = {d.keypoint_id: (d.x, d.y) for d in predictions[i]}
            coords = [by_id[a.keypoint_id] for a in scene.annotations]
        out.append(EvalRecord(
            image_id=scene.scene_id,
            level=scene.level,
            predicted=coords,
            ground_truth=[(a.x, a.y) for a in scene.annotations],
            visible=[a.visible for a in scene.annotations],
            bbox_hw=(scene.bbox[0], scene.bbox[1]),
        ))
    return out
