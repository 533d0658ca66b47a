"""Keypoint cell lookup and hard-negative clutter sampling near keypoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SamplingError
from .geometry import GridSpec, image_to_grid


@dataclass(frozen=True)
class KeypointAnnotation:
    keypoint_id: int
    x: float
    y: float
    visible: bool = True


def keypoint_cells(annotations, spec: GridSpec) -> dict[int, tuple[int, int]]:
    """Map each visible keypoint id to its ``(col, row)`` cell."""
    return {a.keypoint_id: image_to_grid(a.x, a.y, spec) for a in annotations if a.visible}


def neighborhood(cells, spec: GridSpec, radius: int) -> set[tuple[int, int]]:
    """Cells within Chebyshev distance ``radius`` of any cell in ``cells``."""
    out = set()
    for col, row in cells:
        for r in range(max(0, row - radius), min(spec.grid_height, row + radius + 1)):
            for c in range(max(0, col - radius), min(spec.grid_width, col + radius + 1)):
                out.add((c, r))
    return out


def clutter_candidates(annotations, spec: GridSpec, radius: int = 2) -> list[tuple[int, int]]:
    kp = set(keypoint_cells(annotations, spec).values())
    return sorted(neighborhood(kp, spec, radius) - kp, key=lambda c: (c[1], c[0]))


def sample_clutter(annotations, spec: GridSpec, count: int, radius: int = 2,
                   rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """Draw ``count`` distinct non-keypoint cells, preferring the keypoint neighborhood.

    Cells near visible keypoints are drawn first; if there are too few of
    them the rest come uniformly from every other non-keypoint cell.
    """
    rng = rng if rng is not None else np.random.default_rng()
    kp = set(keypoint_cells(annotations, spec).values())
    all_cells = [(c, r) for r in range(spec.grid_height) for c in range(spec.grid_width)]
    free = [cell for cell in all_cells if cell not in kp]
    if count > len(free):
        raise SamplingError(f"need {count} clutter cells, grid has only {len(free)} non-keypoint cells")
    near = clutter_candidates(annotations, spec, radius)
    if len(near) >= count:
        idx = rng.choice(len(near), size=count, replace=False)
        return [near[i] for i in idx]
    near_set = set(near)
    rest = [cell for cell in free if cell not in near_set]
    idx = rng.choice(len(rest), size=count - len(near), replace=False)
    chosen = list(near) + [rest[i] for i in idx]
    return [chosen[i] for i in rng.permutation(len(chosen))]


def gather(feature_map, cells):
    """Feature vectors at ``(col, row)`` cells, in input order."""
    if len(cells) == 0:
        return feature_map[:0, 0] if feature_map.ndim == 3 else []
    rows = [c[1] for c in cells]
    cols = [c[0] for c in cells]
    return feature_map[rows, cols]
