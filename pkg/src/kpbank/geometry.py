"""Pixel <-> feature-cell mapping for a fixed extractor stride."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError, DomainError


@dataclass(frozen=True)
class GridSpec:
    image_height: int
    image_width: int
    stride: int = 4

    def __post_init__(self):
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")
        if self.image_height < 1 or self.image_width < 1:
            raise ContractError("image dims must be positive")

    @property
    def grid_height(self) -> int:
        return math.ceil(self.image_height / self.stride)

    @property
    def grid_width(self) -> int:
        return math.ceil(self.image_width / self.stride)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_height, self.grid_width


def image_to_grid(x: float, y: float, spec: GridSpec) -> tuple[int, int]:
    """Return the ``(col, row)`` cell containing pixel coordinate ``(x, y)``."""
    if not (0 <= x < spec.image_width and 0 <= y < spec.image_height):
        raise DomainError(f"({x}, {y}) outside {spec.image_width}x{spec.image_height} image")
    col = min(int(math.floor(x / spec.stride)), spec.grid_width - 1)
    row = min(int(math.floor(y / spec.stride)), spec.grid_height - 1)
    return col, row


def grid_to_image(cell: tuple[int, int], spec: GridSpec) -> tuple[float, float]:
    """Center of ``cell`` in pixel coordinates, clamped into the image.

    The clamp only matters for the last partial cell when the image size is
    not a multiple of the stride.
    """
    col, row = cell
    if not (0 <= col < spec.grid_width and 0 <= row < spec.grid_height):
        raise DomainError(f"cell {cell} outside {spec.grid_width}x{spec.grid_height} grid")
    x = (col + 0.5) * spec.stride
    y = (row + 0.5) * spec.stride
    # the clamped point must stay inside the cell for the round trip
    x = min(x, (col * spec.stride + spec.image_width) / 2.0)
    y = min(y, (row * spec.stride + spec.image_height) / 2.0)
    return x, y
