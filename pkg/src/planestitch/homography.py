"""Projective transform algebra.

Conventions used throughout the package:

* Points are ``(x, y)`` pixel coordinates with the origin at the top-left.
* The image rectangle of a ``w x h`` frame has corners ``(0,0), (w,0),
  (0,h), (w,h)`` in that order (TL, TR, BL, BR), so the diagonals are
  p1->p4 and p2->p3.
* A stitching homography ``H`` maps reference-image coordinates to
  target-image coordinates.  Its 4-pt offsets are the displacements of the
  reference rectangle corners in the target image.
* ``compose(a, b)`` applies ``b`` first: ``compose(a, b) @ x == a @ (b @ x)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateQuad, PointAtInfinity

# offsets_to_homography refuses systems worse conditioned than this
COND_LIMIT = 1e12
# smallest admissible projective denominator over the image rectangle
DENOM_EPS = 1e-8


def canonical(m):
    """Scale a 3x3 matrix so that m[2,2] == 1 (unit Frobenius norm if m[2,2] ~ 0)."""
    m = np.asarray(m, dtype=float).reshape(3, 3)
    norm = np.linalg.norm(m)
    if norm == 0 or not np.all(np.isfinite(m)):
        raise DegenerateQuad("homography matrix is zero or non-finite")
    if abs(m[2, 2]) > 1e-12 * norm:
        return m / m[2, 2]
    m = m / norm
    # fix the sign so the representation is unique
    flat = m.ravel()
    first = flat[np.flatnonzero(np.abs(flat) > 1e-15)[0]]
    return m if first > 0 else -m


@dataclass(frozen=True, eq=False)
class Homography:
    """Non-degenerate projective map stored in canonical scale."""

    m: np.ndarray

    def __post_init__(self):
        m = canonical(self.m)
        det = np.linalg.det(m)
        # Hadamard ratio: 1 for orthogonal columns, 0 for a singular matrix
        if not np.isfinite(det) or abs(det) <= 1e-12 * np.prod(np.linalg.norm(m, axis=0)):
            raise DegenerateQuad("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "Homography":
        sy = sx if sy is None else sy
        return cls(np.diag([sx, sy, 1.0]))

    @classmethod
    def similarity(cls, scale: float, angle: float, dx: float = 0.0, dy: float = 0.0) -> "Homography":
        c, s = scale * np.cos(angle), scale * np.sin(angle)
        return cls(np.array([[c, -s, dx], [s, c, dy], [0.0, 0.0, 1.0]]))

    def apply(self, pts) -> np.ndarray:
        """Map an ``(N, 2)`` array of points; raises PointAtInfinity on a vanishing denominator."""
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        m = self.m
        den = m[2, 0] * flat[:, 0] + m[2, 1] * flat[:, 1] + m[2, 2]
        if np.any(np.abs(den) < DENOM_EPS):
            raise PointAtInfinity("point maps to infinity")
        x = (m[0, 0] * flat[:, 0] + m[0, 1] * flat[:, 1] + m[0, 2]) / den
        y = (m[1, 0] * flat[:, 0] + m[1, 1] * flat[:, 1] + m[1, 2]) / den
        return np.stack([x, y], axis=-1).reshape(pts.shape)

    def allclose(self, other: "Homography", rtol: float = 1e-9) -> bool:
        return relative_error(self, other) <= rtol

    def to_json(self) -> dict:
        return {"h": [float(v) for v in self.m.ravel()]}

    @classmethod
    def from_json(cls, obj) -> "Homography":
        vals = np.asarray(obj["h"] if isinstance(obj, dict) else obj, dtype=float)
        if vals.size != 9 or vals.shape not in ((9,), (3, 3)):
            raise DegenerateQuad("homography JSON needs 9 numbers, flat or as 3x3 rows")
        return cls(vals.reshape(3, 3))

    def __repr__(self):
        return f"Homography({np.array2string(self.m, precision=6)})"


def relative_error(a: Homography, b: Homography) -> float:
    """Max-abs difference of the canonical matrices relative to their scale."""
    return float(np.max(np.abs(a.m - b.m)) / max(1.0, np.max(np.abs(b.m))))


def rect_corners(w: float, h: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])


def signed_area(quad) -> float:
    """Shoelace area of a TL, TR, BL, BR quad traversed TL->TR->BR->BL."""
    q = np.asarray(quad, dtype=float)[[0, 1, 3, 2]]
    x, y = q[:, 0], q[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return o1 * o2 < 0 and o3 * o4 < 0


def check_quad(quad) -> None:
    """Raise DegenerateQuad unless the quad is simple with positive area."""
    q = np.asarray(quad, dtype=float)
    tl, tr, bl, br = q
    if _segments_cross(tl, tr, br, bl) or _segments_cross(tr, br, bl, tl):
        raise DegenerateQuad("quad is self-intersecting")
    if signed_area(q) <= 0:
        raise DegenerateQuad("quad has non-positive signed area")


@dataclass(frozen=True, eq=False)
class FourPointOffsets:
    """Corner displacements (TL, TR, BL, BR) of a ``w x h`` frame."""

    offsets: np.ndarray
    w: float
    h: float

    def __post_init__(self):
        off = np.array(self.offsets, dtype=float).reshape(4, 2)
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def quad(self) -> np.ndarray:
        return rect_corners(self.w, self.h) + self.offsets


@dataclass(frozen=True, eq=False)
class DecompositionCoefficients:
    """Per-vertex plane coefficients, clamped to [0, 1]."""

    c: np.ndarray

    def __post_init__(self):
        c = np.clip(np.array(self.c, dtype=float).reshape(4), 0.0, 1.0)
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def uniform(cls, t: float) -> "DecompositionCoefficients":
        return cls(np.full(4, t))

    def to_json(self) -> dict:
        return {"c": [float(v) for v in self.c]}

    @classmethod
    def from_json(cls, obj) -> "DecompositionCoefficients":
        vals = obj["c"] if isinstance(obj, dict) else obj
        return cls(vals)


def homography_from_points(src, dst) -> Homography:
    """Exact homography from four correspondences via the 8x8 linear system.

    Coordinates are normalized to the unit box of ``src`` first, so the
    conditioning test reflects geometry rather than pixel magnitudes.
    """
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    t_src = _unit_box(src)
    t_dst = _unit_box(dst)
    s = _apply_affine(t_src, src)
    d = _apply_affine(t_dst, dst)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = s[i]
        u, v = d[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DegenerateQuad(f"4-point system is singular (cond={cond:.3g})")
    sol = np.linalg.solve(a, b)
    hn = np.append(sol, 1.0).reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ hn @ t_src)


def _unit_box(pts):
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    scale = max(float(span.max()), 1e-300)
    return np.array([[1 / scale, 0, -lo[0] / scale], [0, 1 / scale, -lo[1] / scale], [0, 0, 1]])


def _apply_affine(t, pts):
    return pts @ t[:2, :2].T + t[:2, 2]


def offsets_to_homography(off: FourPointOffsets) -> Homography:
    corners = rect_corners(off.w, off.h)
    return homography_from_points(corners, corners + off.offsets)


def homography_to_offsets(h: Homography, w: float, h_px: float) -> FourPointOffsets:
    corners = rect_corners(w, h_px)
    return FourPointOffsets(h.apply(corners) - corners, w, h_px)


def invert(h: Homography) -> Homography:
    return Homography(np.linalg.inv(h.m))


def compose(a: Homography, b: Homography) -> Homography:
    """Homography applying ``b`` first, then ``a``."""
    return Homography(a.m @ b.m)


def decompose(h: Homography, c: DecompositionCoefficients, w: float, h_px: float):
    """Split ``h`` into ``(h_ref, h_tgt)`` for the plane selected by ``c``.

    ``h_tgt`` is the homography of the per-vertex scaled offsets and
    ``h_ref = h^-1 h_tgt``.  Both map plane coordinates into their image, so
    ``compose(h, h_ref) == h_tgt``.
    """
    if not isinstance(c, DecompositionCoefficients):
        c = DecompositionCoefficients(c)
    off = homography_to_offsets(h, w, h_px)
    scaled = FourPointOffsets(off.offsets * c.c[:, None], w, h_px)
    check_quad(scaled.quad)
    # the two single-view planes are returned exactly, free of solve round-off
    if np.all(c.c == 1.0):
        return Homography.identity(), h
    if np.all(c.c == 0.0):
        return invert(h), Homography.identity()
    h_tgt = offsets_to_homography(scaled)
    h_ref = compose(invert(h), h_tgt)
    return h_ref, h_tgt


def motion_field(h: Homography, w: int, h_px: int) -> np.ndarray:
    """Per-pixel displacement ``h(x, y) - (x, y)`` as an ``(h_px, w, 2)`` array."""
    ys, xs = np.mgrid[0:h_px, 0:w].astype(float)
    m = h.m
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    if np.any(den <= DENOM_EPS):
        raise PointAtInfinity("projective denominator vanishes on the grid")
    mx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / den - xs
    my = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / den - ys
    return np.stack([mx, my], axis=-1)


def warp_quad(h: Homography, w: float, h_px: float) -> np.ndarray:
    """Image of the frame rectangle under ``h`` as a (4, 2) TL, TR, BL, BR array."""
    return h.apply(rect_corners(w, h_px))


def corner_error(a: Homography, b: Homography, w: float, h_px: float) -> float:
    """Mean distance between the frame corners mapped by ``a`` and by ``b``."""
    return float(np.mean(np.linalg.norm(warp_quad(a, w, h_px) - warp_quad(b, w, h_px), axis=1)))


def random_homography(rng, w: float, h_px: float, magnitude: float = 0.25) -> Homography:
    """Homography whose corner offsets are uniform in +-magnitude*min(w, h)."""
    lim = magnitude * min(w, h_px)
    while True:
        off = FourPointOffsets(rng.uniform(-lim, lim, size=(4, 2)), w, h_px)
        try:
            check_quad(off.quad)
            return offsets_to_homography(off)
        except DegenerateQuad:
            continue
