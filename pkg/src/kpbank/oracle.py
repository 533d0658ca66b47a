"""Brute-force versions of the full-dataset distance objectives.

The training losses only see prototypes and a bounded clutter bank. These
functions compute the sums those stand in for, so the approximation can be
checked on corpora small enough to enumerate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .banks import ClutterBank, KeypointBank
from .errors import ContractError, InitError
from .extractor import l2_normalize
from .losses import distance_sq


@dataclass
class FeatureCorpus:
    keypoint_features: list  # per keypoint id, (n_k, D) array
    clutter_features: np.ndarray  # (M, D)

    def __post_init__(self):
        arrays = [np.asarray(f, dtype=np.float64) for f in self.keypoint_features]
        clutter = np.asarray(self.clutter_features, dtype=np.float64)
        dim = next((a.shape[-1] for a in [*arrays, clutter] if a.size), 1)
        self.keypoint_features = [a.reshape(-1, dim) for a in arrays]
        self.clutter_features = clutter.reshape(-1, dim)
        for arr in [*self.keypoint_features, self.clutter_features]:
            if arr.size and np.any(np.abs(np.linalg.norm(arr, axis=1) - 1) > 1e-6):
                raise ContractError("corpus features must be unit norm")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_features)


def exact_within(f, k: int, corpus: FeatureCorpus) -> float:
    """Sum of squared distances from ``f`` to every stored feature of keypoint ``k``."""
    feats = corpus.keypoint_features[k]
    if len(feats) == 0:
        raise ContractError(f"corpus has no features for keypoint {k}")
    return sum(distance_sq(f, g) for g in feats)


def exact_between(f, k: int, corpus: FeatureCorpus) -> float:
    """Sum of squared distances from ``f`` to every feature of every other keypoint."""
    return sum(distance_sq(f, g)
               for j, feats in enumerate(corpus.keypoint_features) if j != k
               for g in feats)


def exact_clutter(f, corpus: FeatureCorpus) -> float:
    return sum(distance_sq(f, c) for c in corpus.clutter_features)


def approx_within(f, k: int, kp_bank: KeypointBank) -> float:
    return distance_sq(f, kp_bank.prototypes[k])


def approx_between(f, k: int, kp_bank: KeypointBank) -> float:
    return sum(distance_sq(f, theta) for j, theta in enumerate(kp_bank.prototypes) if j != k)


def approx_clutter(f, clutter_bank: ClutterBank) -> float:
    return sum(distance_sq(f, c) for c in clutter_bank.vectors())


def epoch_average_prototypes(corpus_or_lists) -> np.ndarray:
    """Normalized mean feature per keypoint over the whole corpus."""
    lists = corpus_or_lists.keypoint_features if isinstance(corpus_or_lists, FeatureCorpus) else corpus_or_lists
    protos = []
    for k, feats in enumerate(lists):
        feats = np.asarray(feats, dtype=np.float64)
        if len(feats) == 0:
            raise InitError(f"keypoint {k} has no features to average")
        protos.append(l2_normalize(feats.mean(axis=0)))
    return np.stack(protos)


@dataclass
class ApproximationReport:
    rows: list = field(default_factory=list)  # (keypoint, index, objective, exact, approx)
    rank_correlation: dict = field(default_factory=dict)  # objective -> rho or None
    degenerate: list = field(default_factory=list)

    OBJECTIVES = ("within", "between", "clutter")

    def pairs(self, objective: str) -> tuple[np.ndarray, np.ndarray]:
        sel = [(r[3], r[4]) for r in self.rows if r[2] == objective]
        arr = np.array(sel, dtype=np.float64).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["keypoint", "index", "objective", "exact", "approx"])
        for k, i, obj, ex, ap in self.rows:
            writer.writerow([k, i, obj, repr(ex), repr(ap)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        for obj in self.OBJECTIVES:
            rho = self.rank_correlation.get(obj)
            ex, ap = self.pairs(obj)
            rho_s = "undefined" if rho is None else f"{rho:.6f}"
            lines.append(f"{obj:<8} n={len(ex):<5d} spearman={rho_s} max|exact-approx|="
                         f"{(np.max(np.abs(ex - ap)) if len(ex) else 0.0):.3e}")
        for note in self.degenerate:
            lines.append(f"degenerate: {note}")
        return "\n".join(lines) + "\n"


def approximation_report(corpus: FeatureCorpus, kp_bank: KeypointBank, clutter_bank: ClutterBank) -> ApproximationReport:
    """Tabulate exact vs. bank-approximated objectives for every keypoint feature."""
    report = ApproximationReport()
    for k, feats in enumerate(corpus.keypoint_features):
        for i, f in enumerate(feats):
            report.rows.append((k, i, "within", exact_within(f, k, corpus), approx_within(f, k, kp_bank)))
            report.rows.append((k, i, "between", exact_between(f, k, corpus), approx_between(f, k, kp_bank)))
            report.rows.append((k, i, "clutter", exact_clutter(f, corpus), approx_clutter(f, clutter_bank)))
    for obj in report.OBJECTIVES:
        ex, ap = report.pairs(obj)
        if len(ex) < 2 or np.ptp(ex) == 0 or np.ptp(ap) == 0:
            report.rank_correlation[obj] = None
            report.degenerate.append(f"{obj}: constant values, rank correlation undefined")
            continue
        report.rank_correlation[obj] = float(stats.spearmanr(ex, ap).statistic)
    return report
