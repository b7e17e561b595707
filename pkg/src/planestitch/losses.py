"""Alignment and mesh-shape losses, used as diagnostics and as the sigma objective.

Photometric means run over every pixel of the frame with the validity mask
multiplied in, so pixels without a counterpart contribute zero rather than
being dropped from the denominator.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CanvasMismatch, DimensionMismatch, ZeroLengthEdge
from .homography import Homography, invert
from .warp import WarpedImage, sample_homography


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    w_tps: float = 4.0
    w_s: float = 4.0
    w_c: float = 10.0
    alpha: float = 1.0 / 8.0
    u: int = 12
    v: int = 12

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"loss weight {name} must be positive, got {value}")


class EmptyOverlapWarning(UserWarning):
    pass


def _broadcast_mask(mask, img):
    return mask[..., None] if img.ndim == 3 else mask


def _one_way(a, b, g: Homography, stride: int):
    """(mean |a * valid(g) - b(g x)| over the frame of ``a``, valid fraction)."""
    warped, mask = sample_homography(b, g, a.shape[:2], stride)
    a = a[::stride, ::stride]
    return float(np.mean(np.abs(a * _broadcast_mask(mask, a) - warped))), float(np.mean(mask))


def alignment_loss_h(i_ref, i_tgt, h: Homography, weights: LossWeights | None = None, stride: int = 1) -> float:
    """Symmetric photometric loss of ``h`` (reference -> target pixels).

    ``stride > 1`` averages over a sub-lattice of pixels instead of all of
    them, a cheaper estimate of the same mean.
    """
    weights = weights or LossWeights()
    i_ref = np.asarray(i_ref, dtype=float)
    i_tgt = np.asarray(i_tgt, dtype=float)
    if i_ref.shape != i_tgt.shape:
        raise DimensionMismatch(f"image shapes differ: {i_ref.shape} vs {i_tgt.shape}")
    forward, _ = _one_way(i_ref, i_tgt, h, stride)
    backward, _ = _one_way(i_tgt, i_ref, invert(h), stride)
    return weights.lam * (forward + backward)


def overlap_alignment_error(i_ref, i_tgt, h: Homography, weights: LossWeights | None = None, stride: int = 1):
    """The symmetric loss of :func:`alignment_loss_h` averaged over overlap pixels only.

    Returns ``(error, overlap)`` where ``overlap`` is the smaller of the two
    covered frame fractions.  Unlike the frame mean, this error does not
    shrink when a homography pushes content out of view.
    """
    weights = weights or LossWeights()
    i_ref = np.asarray(i_ref, dtype=float)
    i_tgt = np.asarray(i_tgt, dtype=float)
    if i_ref.shape != i_tgt.shape:
        raise DimensionMismatch(f"image shapes differ: {i_ref.shape} vs {i_tgt.shape}")
    forward, cover_ref = _one_way(i_ref, i_tgt, h, stride)
    backward, cover_tgt = _one_way(i_tgt, i_ref, invert(h), stride)
    overlap = min(cover_ref, cover_tgt)
    if overlap == 0:
        return float("inf"), 0.0
    return weights.lam * (forward / cover_ref + backward / cover_tgt), overlap


def alignment_loss_tps(i_ref, warped_tgt: WarpedImage, weights: LossWeights | None = None) -> float:
    """w_tps times the masked absolute error over the reference frame.

    The reference frame is located on the canvas at ``warped_tgt.origin``;
    canvas pixels outside the frame do not count.
    """
    weights = weights or LossWeights()
    i_ref = np.asarray(i_ref, dtype=float)
    hh, ww = i_ref.shape[:2]
    ox, oy = (int(round(v)) for v in warped_tgt.origin)
    ch, cw = warped_tgt.mask.shape
    if warped_tgt.pixels.shape[2:] != i_ref.shape[2:]:
        raise CanvasMismatch("channel count differs between reference and warped target")
    # intersection of the reference frame with the canvas
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + ww, cw), min(oy + hh, ch)
    if x1 <= x0 or y1 <= y0:
        raise CanvasMismatch("reference frame does not intersect the canvas")
    mask = np.zeros((hh, ww))
    tgt = np.zeros_like(i_ref)
    mask[y0 - oy:y1 - oy, x0 - ox:x1 - ox] = warped_tgt.mask[y0:y1, x0:x1]
    tgt[y0 - oy:y1 - oy, x0 - ox:x1 - ox] = warped_tgt.pixels[y0:y1, x0:x1]
    if not mask.any():
        warnings.warn("empty overlap; TPS alignment loss is 0", EmptyOverlapWarning, stacklevel=2)
        return 0.0
    m = _broadcast_mask(mask, i_ref)
    return weights.w_tps * float(np.mean(np.abs(i_ref * m - tgt * m)))


def _check_mesh(mesh, weights: LossWeights):
    mesh = np.asarray(mesh, dtype=float)
    if mesh.shape != (weights.u + 1, weights.v + 1, 2):
        raise DimensionMismatch(f"mesh shape {mesh.shape}, expected {(weights.u + 1, weights.v + 1, 2)}")
    return mesh


def intra_grid_loss(mesh, w: float, h: float, weights: LossWeights | None = None) -> float:
    """Penalty on cell edges whose axis projection falls below ``alpha`` of a cell."""
    weights = weights or LossWeights()
    mesh = _check_mesh(mesh, weights)
    horiz = np.abs(np.diff(mesh[..., 0], axis=1))  # (U+1, V)
    vert = np.abs(np.diff(mesh[..., 1], axis=0))  # (U, V+1)
    min_w = weights.alpha * w / weights.v
    min_h = weights.alpha * h / weights.u
    return float(np.mean(np.maximum(min_w - horiz, 0.0)) + np.mean(np.maximum(min_h - vert, 0.0)))


def _edge_pairs(mesh):
    rows = np.diff(mesh, axis=1)  # horizontal edges along each row
    cols = np.diff(mesh, axis=0)
    first = np.concatenate([rows[:, :-1].reshape(-1, 2), cols[:-1].reshape(-1, 2)])
    second = np.concatenate([rows[:, 1:].reshape(-1, 2), cols[1:].reshape(-1, 2)])
    return first, second


def inter_grid_loss(mesh, weights: LossWeights | None = None) -> float:
    """Mean of ``1 - cos`` over consecutive edges of every grid line."""
    weights = weights or LossWeights()
    mesh = _check_mesh(mesh, weights)
    a, b = _edge_pairs(mesh)
    if len(a) == 0:
        return 0.0
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na <= 1e-12) or np.any(nb <= 1e-12):
        raise ZeroLengthEdge("mesh has a zero-length edge")
    cos = np.sum(a * b, axis=1) / (na * nb)
    return float(np.mean(1.0 - np.clip(cos, -1.0, 1.0)))


def total_loss(align: float, shape: float, coef: float, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return float(align + weights.w_s * shape + weights.w_c * coef)


@dataclass(frozen=True)
class LossBreakdown:
    """Individual terms; the TPS alignment term already carries ``w_tps``."""

    align_h: float = 0.0
    align_tps: float = 0.0
    shape_intra: float = 0.0
    shape_inter: float = 0.0
    coef: float = 0.0
    weights: LossWeights = LossWeights()

    @property
    def align(self) -> float:
        return self.align_h + self.align_tps

    @property
    def shape(self) -> float:
        return self.shape_intra + self.shape_inter

    @property
    def total(self) -> float:
        return total_loss(self.align, self.shape, self.coef, self.weights)

    def to_json(self) -> dict:
        return {
            "align_h": float(self.align_h),
            "align_tps": float(self.align_tps),
            "shape_intra": float(self.shape_intra),
            "shape_inter": float(self.shape_inter),
            "coef": float(self.coef),
            "total": self.total,
        }
