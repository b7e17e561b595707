"""Vertex distortion scores of warped quads and the semantic distortion loss.

Scores are dimensionless and invariant to similarity transforms of the quad,
so a quad that is a rotated, uniformly scaled and translated square scores
zero everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateQuad, DimensionMismatch, EmptyImage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SALIENCY_SIGMA = 2.0

# incident edges per vertex: TL->(TR, BL), TR->(TL, BR), BL->(BR, TL), BR->(BL, TR)
_NEIGHBOURS = ((1, 2), (0, 3), (3, 0), (2, 1))


@dataclass(frozen=True)
class VertexScores:
    distance: np.ndarray
    angle: np.ndarray
    global_: float

    @property
    def final(self) -> np.ndarray:
        return self.distance + self.angle + self.global_

    def to_json(self) -> dict:
        return {
            "distance": [float(v) for v in self.distance],
            "angle": [float(v) for v in self.angle],
            "global": float(self.global_),
            "final": [float(v) for v in self.final],
        }


def _abs_cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateQuad("zero-length edge or diagonal")
    return min(1.0, abs(float(np.dot(a, b))) / (na * nb))


def distance_scores(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    centre = q.mean(axis=0)
    d = np.linalg.norm(q - centre, axis=1)
    dmin = d.min()
    if dmin <= 1e-9 * max(1.0, d.max()):
        raise DegenerateQuad("vertex coincides with the quad centroid")
    return d / dmin - 1.0


def angle_scores(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([_abs_cos(q[a] - q[i], q[b] - q[i]) for i, (a, b) in enumerate(_NEIGHBOURS)])


def global_score(q) -> float:
    q = np.asarray(q, dtype=float)
    return _abs_cos(q[3] - q[0], q[2] - q[1])


def final_scores(q) -> VertexScores:
    return VertexScores(distance_scores(q), angle_scores(q), global_score(q))


def bilinear_weights(w: int, h: int) -> np.ndarray:
    """(4, h, w) corner weights for TL, TR, BL, BR over normalized pixel positions."""
    u = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    v = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(1 - uu) * (1 - vv), uu * (1 - vv), (1 - uu) * vv, uu * vv])


def distortion_map(scores, w: int, h: int) -> np.ndarray:
    """Bilinear blend of the four vertex scores over a ``h x w`` source raster.

    ``scores`` is a VertexScores or any length-4 sequence of final scores.
    """
    if w < 1 or h < 1:
        raise DimensionMismatch("map dimensions must be positive")
    s = scores.final if isinstance(scores, VertexScores) else np.asarray(scores, dtype=float)
    return np.tensordot(s, bilinear_weights(w, h), axes=1)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 3:
        return img[..., :3] @ LUMA_WEIGHTS
    return img


def saliency_map(img, sigma: float = SALIENCY_SIGMA) -> np.ndarray:
    """Raw saliency: Gaussian-smoothed gradient magnitude of the luma channel."""
    if img is None or np.asarray(img).size == 0:
        raise EmptyImage("saliency of an empty image")
    lum = to_luma(img)
    if lum.shape[0] < 2 or lum.shape[1] < 2:
        raise EmptyImage("image needs at least 2x2 pixels")
    gy, gx = np.gradient(lum)
    return ndimage.gaussian_filter(np.hypot(gx, gy), sigma, mode="reflect", truncate=4.0)


def normalize_saliency_pair(a, b):
    """Joint min-max normalization of two maps; a flat pair maps to zeros."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return np.zeros_like(a), np.zeros_like(b)
    span = hi - lo
    return (a - lo) / span, (b - lo) / span


def semantic_distortion_loss(d_ref, s_ref, d_tgt, s_tgt) -> float:
    """Per-pixel mean of D*S summed over the two views."""
    total = 0.0
    for d, s in ((d_ref, s_ref), (d_tgt, s_tgt)):
        d = np.asarray(d, dtype=float)
        s = np.asarray(s, dtype=float)
        if d.shape != s.shape:
            raise DimensionMismatch(f"distortion map {d.shape} vs saliency {s.shape}")
        total += float(np.mean(d * s))
    return total
