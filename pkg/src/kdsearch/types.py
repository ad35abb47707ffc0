"""Shared value types, RNG streams and small numeric primitives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box ``(left, top, width, height)`` in continuous pixels."""

    x: float
    y: float
    w: float
    h: float
    identity: Optional[int] = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("box corner must be finite")
        if self.identity is not None and self.identity < 0:
            raise ValueError(f"identity must be non-negative, got {self.identity}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h, self.identity)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class EmbeddingBatch:
    rows: np.ndarray
    source: str = "student-head"

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError(f"embedding batch must be (B>=1, d), got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding batch has non-finite entries")
        if self.source not in ("student-head", "teacher-model"):
            raise ValueError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def check_probabilities(probs: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Validate a (B, C) array of class distributions and return it as float64."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise ValueError(f"probability rows must sum to 1 (got {sums})")
    return probs


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    beta_p: float = 0.1
    beta_pr: float = 1.0
    beta_tr: float = 1.0
    margin: float = 0.3
    # distances for the triplet term on raw embeddings unless set
    normalize_triplet: bool = False

    def __post_init__(self):
        for name in ("lam", "beta_p", "beta_pr", "beta_tr", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossConfig.{name} must be >= 0")


@dataclass(frozen=True)
class AugConfig:
    """Spatial augmentation geometry.

    ``alpha`` caps the crop range, ``delta_p`` is the virtual padding of the
    Re-ID patch pipeline, ``patch_h`` x ``patch_w`` the teacher input size and
    ``stride`` the pixels per student feature cell.
    """

    alpha: float = 8.0
    delta_p: float = 1.25
    patch_h: int = 32
    patch_w: int = 16
    stride: int = 4

    def __post_init__(self):
        if self.alpha < 0 or self.delta_p < 0:
            raise ValueError("alpha and delta_p must be non-negative")
        if self.patch_h <= 0 or self.patch_w <= 0 or self.stride <= 0:
            raise ValueError("patch size and stride must be positive")


# Values used for the full-size pipeline; handy for formula checks.
FULL_SIZE_AUG = AugConfig(alpha=40.0, delta_p=10.0, patch_h=256, patch_w=128, stride=16)


class Rng:
    """Seeded, splittable random stream (PCG64 under a SeedSequence)."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
        self.gen = np.random.Generator(np.random.PCG64(self._ss))

    @property
    def seed(self):
        return self._ss.entropy

    def split(self, n: int = 1) -> list["Rng"]:
        return [Rng(child) for child in self._ss.spawn(n)]

    def child(self) -> "Rng":
        return self.split(1)[0]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)


@dataclass
class NormalizedRows:
    """Row-normalized matrix plus the count of rows that had ~zero norm."""

    entries: np.ndarray
    degenerate: int = 0
    norms: np.ndarray = field(default_factory=lambda: np.zeros(0))


def l2_normalize_rows(m: np.ndarray) -> NormalizedRows:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    norms = np.sqrt(np.sum(m * m, axis=1))
    bad = norms < NORM_EPS
    safe = np.where(bad, 1.0, norms)
    out = np.where(bad[:, None], 0.0, m / safe[:, None])
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("l2_normalize_rows: %d degenerate row(s) mapped to zero", n_bad)
    return NormalizedRows(out, n_bad, norms)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of ``x, y, w, h`` boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])
