"""Keypoint prototype bank (momentum update) and clutter bank (oldest-first replacement)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InitError
from .extractor import l2_normalize

UNIT_TOL = 1e-3


def _check_unit(vectors: np.ndarray, what: str):
    norms = np.linalg.norm(vectors, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what}: expected unit vectors, norms span [{norms.min():.4g}, {norms.max():.4g}]")


def random_units(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class KeypointBank:
    prototypes: np.ndarray  # (K, D), unit rows
    alpha: float = 0.9

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ContractError("prototypes must be a K x D matrix")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def num_keypoints(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def update(self, batch_features) -> "KeypointBank":
        """Blend each prototype toward its batch mean, then renormalize.

        ``batch_features`` maps keypoint id to an (n, D) array of unit
        features from the current batch (a list indexed by id also works).
        Keypoints with no features are left alone.
        """
        items = batch_features.items() if isinstance(batch_features, dict) else enumerate(batch_features)
        for k, feats in items:
            feats = np.asarray(feats, dtype=np.float64).reshape(-1, self.dim)
            if len(feats) == 0:
                continue
            if not 0 <= k < self.num_keypoints:
                raise ContractError(f"keypoint id {k} outside bank of {self.num_keypoints}")
            _check_unit(feats, f"features of keypoint {k}")
            if self.alpha == 1.0:
                continue
            blended = self.alpha * self.prototypes[k] + (1.0 - self.alpha) * feats.mean(axis=0)
            self.prototypes[k] = l2_normalize(blended)
        return self

    def set_prototypes(self, prototypes: np.ndarray):
        prototypes = np.asarray(prototypes, dtype=np.float64)
        if prototypes.shape != self.prototypes.shape:
            raise ContractError(f"shape {prototypes.shape} != {self.prototypes.shape}")
        self.prototypes = prototypes.copy()

    def copy(self) -> "KeypointBank":
        return KeypointBank(self.prototypes.copy(), self.alpha)


def init_keypoint_bank(initial_features=None, num_keypoints: int | None = None, dim: int | None = None,
                       alpha: float = 0.9, seed: int = 0, random_fallback: bool = False) -> KeypointBank:
    """Prototypes as normalized feature means, or random unit rows.

    With ``initial_features=None`` every row is random. Otherwise each
    keypoint needs at least one feature unless ``random_fallback`` is set.
    """
    rng = np.random.default_rng(seed)
    if initial_features is None:
        if num_keypoints is None or dim is None:
            raise InitError("random init needs num_keypoints and dim")
        return KeypointBank(random_units(rng, num_keypoints, dim), alpha)

    lists = [np.asarray(f, dtype=np.float64) for f in initial_features]
    num_keypoints = num_keypoints if num_keypoints is not None else len(lists)
    if dim is None:
        dim = next((f.shape[-1] for f in lists if f.size), None)
        if dim is None:
            raise InitError("cannot infer feature dim from empty feature lists")
    fallback = random_units(rng, num_keypoints, dim)
    protos = np.empty((num_keypoints, dim))
    for k in range(num_keypoints):
        feats = lists[k].reshape(-1, dim) if k < len(lists) else np.empty((0, dim))
        if len(feats) == 0:
            if not random_fallback:
                raise InitError(f"keypoint {k} has no initial features")
            protos[k] = fallback[k]
        else:
            protos[k] = l2_normalize(feats.mean(axis=0))
    return KeypointBank(protos, alpha)


@dataclass
class ClutterBank:
    """Bounded store of clutter groups; the group with the smallest tag is evicted first."""

    capacity: int
    group_size: int
    dim: int
    groups: np.ndarray = field(default=None)  # (n_stored, g, D)
    tags: np.ndarray = field(default=None)  # (n_stored,)
    next_tag: int = 1

    def __post_init__(self):
        if self.capacity < 0 or self.group_size < 1 or self.dim < 1:
            raise ContractError("bad clutter bank dimensions")
        if self.groups is None:
            self.groups = np.empty((0, self.group_size, self.dim))
            self.tags = np.empty(0, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.float64)
        self.tags = np.asarray(self.tags, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def insert(self, group) -> "ClutterBank":
        group = np.asarray(group, dtype=np.float64)
        if group.shape != (self.group_size, self.dim):
            raise ContractError(f"group shape {group.shape} != {(self.group_size, self.dim)}")
        _check_unit(group, "clutter group")
        if self.capacity == 0:
            return self
        if not self.full:
            self.groups = np.concatenate([self.groups, group[None]])
            self.tags = np.append(self.tags, self.next_tag)
        else:
            oldest = int(np.argmin(self.tags))
            self.groups[oldest] = group
            self.tags[oldest] = self.next_tag
        self.next_tag += 1
        return self

    def vectors(self) -> np.ndarray:
        """All stored vectors as a (n_groups * g, D) array in tag order."""
        if len(self) == 0:
            return np.empty((0, self.dim))
        order = np.argsort(self.tags, kind="stable")
        return self.groups[order].reshape(-1, self.dim)

    def copy(self) -> "ClutterBank":
        return ClutterBank(self.capacity, self.group_size, self.dim,
                           self.groups.copy(), self.tags.copy(), self.next_tag)


def init_clutter_bank(num_groups: int, group_size: int, dim: int, sample_source=None, seed: int = 0) -> ClutterBank:
    """Fill a bank with ``num_groups`` groups tagged 1..num_groups.

    ``sample_source`` may be an iterable of (g, D) groups or a callable
    ``rng -> (g, D)``; missing groups are filled with random unit vectors.
    """
    rng = np.random.default_rng(seed)
    bank = ClutterBank(num_groups, group_size, dim)
    source = iter(sample_source) if sample_source is not None and not callable(sample_source) else None
    for _ in range(num_groups):
        group = None
        if callable(sample_source):
            group = sample_source(rng)
        elif source is not None:
            group = next(source, None)
        if group is None:
            group = random_units(rng, group_size, dim)
        bank.insert(group)
    return bank


def update_keypoint_bank(bank: KeypointBank, batch_features) -> KeypointBank:
    return bank.update(batch_features)


def update_clutter_bank(bank: ClutterBank, group) -> ClutterBank:
    return bank.insert(group)


def all_clutter(bank: ClutterBank) -> np.ndarray:
    return bank.vectors()
