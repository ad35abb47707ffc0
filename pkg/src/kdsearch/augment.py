"""Spatial-invariant augmentation geometry and RoIAlign pooling.

Coordinate convention: continuous coordinates where grid cell (row r, col c)
covers ``[c, c+1) x [r, r+1)`` and its value sits at the center
``(c + 0.5, r + 0.5)``. Image pixels use the same convention with unit
stride, feature cells with stride ``S``, so an image point ``p`` maps to the
feature point ``p / S``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .types import AugConfig, BoundingBox, Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CropRange:
    r_w: float
    r_h: float


@dataclass(frozen=True)
class ShiftedProposal:
    base: BoundingBox
    dx: float = 0.0
    dy: float = 0.0
    stride: int = 4

    @property
    def feature_shift(self) -> tuple[float, float]:
        return self.dx / self.stride, self.dy / self.stride

    def image_box(self) -> BoundingBox:
        """Image-space rectangle the teacher crops."""
        return self.base.shifted(self.dx, self.dy)

    def feature_window(self) -> np.ndarray:
        """``(x, y, w, h)`` of the student's RoIAlign window in feature cells."""
        b, s = self.base, self.stride
        return np.array([(b.x + self.dx) / s, (b.y + self.dy) / s, b.w / s, b.h / s])


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    stride: int

    def __post_init__(self):
        if np.asarray(self.data).ndim != 3:
            raise ValueError("feature map must be (channels, height, width)")


def isa_crop_range(box: BoundingBox, cfg: AugConfig) -> CropRange:
    r_h = min(2.0 * box.h * cfg.delta_p / cfg.patch_h, cfg.alpha)
    r_w = min(2.0 * box.w * cfg.delta_p / cfg.patch_w, cfg.alpha)
    return CropRange(r_w=r_w, r_h=r_h)


def _inside(box: BoundingBox, image_size) -> bool:
    h_img, w_img = image_size
    return box.x >= 0 and box.y >= 0 and box.x2 <= w_img and box.y2 <= h_img


def isa_expand_and_crop(
    box: BoundingBox, cfg: AugConfig, rng: Rng, image_size: tuple[int, int]
) -> BoundingBox:
    """Random crop of the box's own size from its alpha-expanded loose box.

    The offset is uniform within the clamped crop range, so the crop never
    leaves the loose box. The result is intersected with the image.
    """
    h_img, w_img = image_size
    if not _inside(box, image_size):
        log.warning("isa_expand_and_crop: box %s exceeds image %s, kept as is", box, image_size)
        return box
    rng_range = isa_crop_range(box, cfg)
    dx = rng.uniform(-rng_range.r_w, rng_range.r_w) if rng_range.r_w > 0 else 0.0
    dy = rng.uniform(-rng_range.r_h, rng_range.r_h) if rng_range.r_h > 0 else 0.0
    x1, y1 = max(box.x + dx, 0.0), max(box.y + dy, 0.0)
    x2, y2 = min(box.x2 + dx, float(w_img)), min(box.y2 + dy, float(h_img))
    if x2 <= x1 or y2 <= y1:
        log.warning("isa_expand_and_crop: degenerate crop, falling back to ground truth")
        return box
    return BoundingBox(x1, y1, x2 - x1, y2 - y1, box.identity)


def fsa_shift(
    box: BoundingBox,
    crop_range: CropRange,
    cfg: AugConfig,
    rng: Rng,
    image_size: Optional[tuple[int, int]] = None,
) -> ShiftedProposal:
    """Draw a feature-level shift within ``r / S`` cells.

    With ``image_size`` the shift is clamped so the shifted box stays inside
    the image (the teacher needs a valid crop of the same rectangle).
    """
    s = cfg.stride
    fx_max, fy_max = crop_range.r_w / s, crop_range.r_h / s
    fx = rng.uniform(-fx_max, fx_max) if fx_max > 0 else 0.0
    fy = rng.uniform(-fy_max, fy_max) if fy_max > 0 else 0.0
    if image_size is not None:
        h_img, w_img = image_size
        fx = float(np.clip(fx, -box.x / s, (w_img - box.x2) / s))
        fy = float(np.clip(fy, -box.y / s, (h_img - box.y2) / s))
    return ShiftedProposal(box, dx=fx * s, dy=fy * s, stride=s)


# --- bilinear sampling -----------------------------------------------------


def _axis_taps(coords: np.ndarray, size: int):
    """Lower/upper neighbor indices, their weights and validity along one axis.

    ``coords`` are continuous positions; samples outside ``[0, size]`` are
    invalid (contribute 0), samples between the extent and the outermost cell
    centers are clamped to the edge cell.
    """
    valid = (coords >= 0) & (coords <= size)
    u = np.clip(coords - 0.5, 0.0, size - 1.0)
    lo = np.floor(u).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = u - lo
    return lo, hi, 1.0 - frac, frac, valid


def sample_grid(box_xywh: Sequence[float], out_h: int, out_w: int):
    """Continuous sample centers (ys, xs) of an out_h x out_w grid over a box."""
    x, y, w, h = box_xywh
    xs = x + (np.arange(out_w) + 0.5) * (w / out_w)
    ys = y + (np.arange(out_h) + 0.5) * (h / out_h)
    return ys, xs


def bilinear_crop(img: np.ndarray, box_xywh, out_h: int, out_w: int) -> np.ndarray:
    """Numpy crop-and-resize of a (C, H, W) array, same sampling as ``roi_align``."""
    c, h, w = img.shape
    ys, xs = sample_grid(box_xywh, out_h, out_w)
    y0, y1, wy0, wy1, vy = _axis_taps(ys, h)
    x0, x1, wx0, wx1, vx = _axis_taps(xs, w)
    wy0, wy1 = wy0 * vy, wy1 * vy
    wx0, wx1 = wx0 * vx, wx1 * vx
    top = img[:, y0][:, :, x0] * wx0 + img[:, y0][:, :, x1] * wx1
    bot = img[:, y1][:, :, x0] * wx0 + img[:, y1][:, :, x1] * wx1
    return top * wy0[:, None] + bot * wy1[:, None]


def roi_align_batch(fm, rois: np.ndarray, out_h: int, out_w: int):
    """RoIAlign with one bilinear sample per output cell.

    ``fm`` is an (N, C, H, W) tensor; ``rois`` an (R, 5) array of
    ``(image index, x, y, w, h)`` in feature coordinates. Returns an
    (R, C, out_h, out_w) tensor, differentiable w.r.t. ``fm``.
    """
    fm = ag.as_tensor(fm)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    n, c, h, w = fm.shape
    if np.any(rois[:, 3] <= 0) or np.any(rois[:, 4] <= 0):
        raise ValueError("RoI must have positive width and height")
    outside = (
        (rois[:, 1] >= w) | (rois[:, 2] >= h) | (rois[:, 1] + rois[:, 3] <= 0) | (rois[:, 2] + rois[:, 4] <= 0)
    )
    if np.any(outside):
        raise ValueError(f"RoI(s) {np.flatnonzero(outside).tolist()} lie fully outside the feature map")
    idx = rois[:, 0].astype(np.int64)
    frac = (np.arange(out_w) + 0.5) / out_w
    xs = rois[:, 1:2] + frac[None] * rois[:, 3:4]
    ys = rois[:, 2:3] + ((np.arange(out_h) + 0.5) / out_h)[None] * rois[:, 4:5]
    y0, y1, wy0, wy1, vy = _axis_taps(ys, h)
    x0, x1, wx0, wx1, vx = _axis_taps(xs, w)
    wy0, wy1 = wy0 * vy, wy1 * vy
    wx0, wx1 = wx0 * vx, wx1 * vx

    ii = idx[:, None, None]
    taps = []
    for yy, wy in ((y0, wy0), (y1, wy1)):
        for xx, wx in ((x0, wx0), (x1, wx1)):
            weight = wy[:, :, None] * wx[:, None, :]  # (R, oh, ow)
            taps.append((yy[:, :, None], xx[:, None, :], weight))

    data = fm.data
    out = np.zeros((len(rois), out_h, out_w, c))
    for yy, xx, weight in taps:
        out += data[ii, :, yy, xx] * weight[..., None]

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # (R, oh, ow, C)
        full = np.zeros_like(data)
        shape = (len(rois), out_h, out_w)
        for yy, xx, weight in taps:
            np.add.at(
                full,
                (np.broadcast_to(ii, shape), slice(None), np.broadcast_to(yy, shape), np.broadcast_to(xx, shape)),
                gt * weight[..., None],
            )
        fm._accumulate(full)

    return ag._make(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (fm,), bw)


def roi_align(fm, proposal: ShiftedProposal | np.ndarray, out_h: int = 4, out_w: int = 2):
    """Pool one (shifted) proposal from a single (C, H, W) feature map."""
    if isinstance(fm, FeatureMap):
        if isinstance(proposal, ShiftedProposal) and proposal.stride != fm.stride:
            raise ValueError("proposal stride does not match feature map stride")
        fm = ag.Tensor(fm.data)
    fm = ag.as_tensor(fm)
    window = proposal.feature_window() if isinstance(proposal, ShiftedProposal) else np.asarray(proposal)
    rois = np.concatenate([[0.0], window])[None]
    return roi_align_batch(fm.reshape(1, *fm.shape), rois, out_h, out_w)[0]
