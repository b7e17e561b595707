"""Backward image warping, thin-plate splines, canvases and compositing.

Every warp is a backward map: each output pixel is traced to a source
position and sampled bilinearly.  Samples are valid only inside the source
pixel-centre rectangle ``[0, W-1] x [0, H-1]``; everything else is zero and
masked out, never edge-extended.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import CanvasMismatch, DegenerateQuad, FoldedMesh, SingularSystem
from .homography import DecompositionCoefficients, Homography, decompose, invert, warp_quad

MAX_CANVAS_FACTOR = 16
_EDGE_TOL = 1e-6


@dataclass(frozen=True)
class Canvas:
    width: int
    height: int
    offset: tuple = (0.0, 0.0)

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass
class WarpedImage:
    pixels: np.ndarray
    mask: np.ndarray
    origin: tuple = (0.0, 0.0)


def make_canvas(quads) -> Canvas:
    """Integer canvas holding every vertex after shifting by ``offset``."""
    pts = np.concatenate([np.asarray(q, dtype=float).reshape(-1, 2) for q in quads])
    lo = np.floor(pts.min(axis=0) + _EDGE_TOL)
    hi = np.ceil(pts.max(axis=0) - _EDGE_TOL)
    size = np.maximum(hi - lo, 1).astype(int)
    return Canvas(int(size[0]), int(size[1]), (float(-lo[0]), float(-lo[1])))


def frame_canvas(img) -> Canvas:
    return Canvas(img.shape[1], img.shape[0], (0.0, 0.0))


def sample(img, xs, ys):
    """Bilinear samples of ``img`` at float positions, plus the validity mask.

    Interpolation uses nested lerps, which return a constant image's value
    exactly, so warping an all-ones image reproduces the mask bit for bit.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    mask = (xs >= -_EDGE_TOL) & (xs <= w - 1 + _EDGE_TOL) & (ys >= -_EDGE_TOL) & (ys <= h - 1 + _EDGE_TOL)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bottom = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    out = top + fy * (bottom - top)
    out[~mask] = 0.0
    return out, mask.astype(float)


def _canvas_grid(canvas: Canvas):
    ys, xs = np.mgrid[0:canvas.height, 0:canvas.width].astype(float)
    return xs - canvas.offset[0], ys - canvas.offset[1]


def _apply_matrix(m, xs, ys):
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    bad = np.abs(den) < 1e-12
    den = np.where(bad, 1.0, den)
    u = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / den
    v = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / den
    # behind the camera or at infinity: force out of bounds
    behind = bad | (den < 0)
    u[behind] = -1e9
    v[behind] = -1e9
    return u, v


def sample_homography(img, g: Homography, shape, stride: int = 1):
    """Output of ``shape`` whose pixel x takes ``img`` at ``g(x)``.

    With ``stride > 1`` only every ``stride``-th row and column is produced.
    """
    ys, xs = np.mgrid[0:shape[0]:stride, 0:shape[1]:stride].astype(float)
    u, v = _apply_matrix(g.m, xs, ys)
    return sample(img, u, v)


def warp_image_h(img, h: Homography, canvas: Canvas) -> WarpedImage:
    """Forward-map ``img`` by ``h`` onto ``canvas`` (sampled through ``h^-1``)."""
    xs, ys = _canvas_grid(canvas)
    u, v = _apply_matrix(invert(h).m, xs, ys)
    pix, mask = sample(img, u, v)
    return WarpedImage(pix, mask, canvas.offset)


# --- thin-plate splines ---------------------------------------------------

def _kernel(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        k = r2 * np.log(r2)
    k[r2 <= 0] = 0.0
    return k


@dataclass(frozen=True)
class TpsTransform:
    """Thin-plate spline from ``src`` control points to ``dst``.

    Solved in coordinates normalized by ``centre`` and ``scale``; the
    kernel's log term makes the fitted map invariant to that similarity.
    """

    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    centre: np.ndarray
    scale: float

    def apply(self, pts) -> np.ndarray:
        return tps_apply(self, pts)


def tps_solve(src_pts, dst_pts) -> TpsTransform:
    src = np.asarray(src_pts, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst_pts, dtype=float).reshape(-1, 2)
    n = len(src)
    if n != len(dst):
        raise SingularSystem("source and target point counts differ")
    if n < 3:
        raise SingularSystem("TPS needs at least 3 control points")
    centre = src.mean(axis=0)
    scale = float(np.max(np.abs(src - centre))) or 1.0
    s = (src - centre) / scale
    diff = s[:, None, :] - s[None, :, :]
    r2 = np.sum(diff**2, axis=-1)
    if np.any(r2[~np.eye(n, dtype=bool)] < 1e-20):
        raise SingularSystem("duplicate control points")
    p = np.c_[np.ones(n), s]
    if np.linalg.matrix_rank(p, tol=1e-9) < 3:
        raise SingularSystem("control points are collinear")
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = _kernel(r2)
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("TPS system produced non-finite weights")
    return TpsTransform(src, dst, sol[:n], sol[n:], centre, scale)


def tps_apply(t: TpsTransform, pts, chunk: int = 65536) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 2)
    s = (t.src - t.centre) / t.scale
    out = np.empty_like(flat)
    for start in range(0, len(flat), chunk):
        q = (flat[start:start + chunk] - t.centre) / t.scale
        r2 = np.sum((q[:, None, :] - s[None, :, :]) ** 2, axis=-1)
        out[start:start + chunk] = _kernel(r2) @ t.weights + np.c_[np.ones(len(q)), q] @ t.affine
    return out.reshape(pts.shape)


def control_grid(w: float, h: float, u: int = 12, v: int = 12) -> np.ndarray:
    """(u+1, v+1, 2) evenly spaced control points over a ``w x h`` frame."""
    ys, xs = np.meshgrid(np.linspace(0, h, u + 1), np.linspace(0, w, v + 1), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def check_folding(t: TpsTransform, oversample: int = 4) -> None:
    """Raise FoldedMesh if the forward map flips orientation anywhere on the control box."""
    lo = t.src.min(axis=0)
    hi = t.src.max(axis=0)
    n = int(np.sqrt(len(t.src))) * oversample + 1
    ys, xs = np.meshgrid(np.linspace(lo[1], hi[1], n), np.linspace(lo[0], hi[0], n), indexing="ij")
    mapped = tps_apply(t, np.stack([xs, ys], axis=-1))
    a = mapped[:-1, :-1]
    b = mapped[:-1, 1:]
    c = mapped[1:, :-1]
    e1, e2 = b - a, c - a
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    if np.any(det <= 0):
        raise FoldedMesh(f"{int(np.sum(det <= 0))} oversampled cells fold over")


def tps_inverse(t: TpsTransform) -> TpsTransform:
    """Approximate inverse by swapping the control-point roles."""
    return tps_solve(t.dst, t.src)


def warp_image_tps(img, t: TpsTransform, canvas: Canvas) -> WarpedImage:
    check_folding(t)
    inv = tps_inverse(t)
    xs, ys = _canvas_grid(canvas)
    src = tps_apply(inv, np.stack([xs, ys], axis=-1))
    pix, mask = sample(img, src[..., 0], src[..., 1])
    return WarpedImage(pix, mask, canvas.offset)


# --- bidirectional stitching ---------------------------------------------

def plane_canvas(h: Homography, c, w, h_px, tps_ref=None, tps_tgt=None) -> Canvas:
    h_ref, h_tgt = decompose(h, c, w, h_px)
    quads = [warp_quad(invert(h_ref), w, h_px), warp_quad(invert(h_tgt), w, h_px)]
    for t in (tps_ref, tps_tgt):
        if t is not None:
            quads.append(t.dst)
    return make_canvas(quads)


def bidirectional_stitch(i_ref, i_tgt, h: Homography, c, tps_ref: TpsTransform | None = None,
                         tps_tgt: TpsTransform | None = None):
    """Warp both views onto the plane selected by ``c``.

    ``h`` maps reference to target pixels.  The optional TPS transforms act
    in plane coordinates after the global warp of their side.
    """
    if not isinstance(c, DecompositionCoefficients):
        c = DecompositionCoefficients(c)
    hh, ww = np.asarray(i_ref).shape[:2]
    if np.asarray(i_tgt).shape[:2] != (hh, ww):
        raise CanvasMismatch("reference and target images must share dimensions")
    h_ref, h_tgt = decompose(h, c, ww, hh)
    canvas = plane_canvas(h, c, ww, hh, tps_ref, tps_tgt)
    if canvas.width * canvas.height > MAX_CANVAS_FACTOR * ww * hh:
        raise DegenerateQuad(f"plane canvas {canvas.width}x{canvas.height} exceeds the size limit")
    xs, ys = _canvas_grid(canvas)
    out = []
    for img, hv, t in ((i_ref, h_ref, tps_ref), (i_tgt, h_tgt, tps_tgt)):
        px, py = xs, ys
        if t is not None:
            check_folding(t)
            q = tps_apply(tps_inverse(t), np.stack([xs, ys], axis=-1))
            px, py = q[..., 0], q[..., 1]
        u, v = _apply_matrix(hv.m, px, py)
        pix, mask = sample(img, u, v)
        out.append(WarpedImage(pix, mask, canvas.offset))
    return out[0], out[1], canvas


def target_in_reference(i_tgt, h: Homography, c, shape, tps_tgt: TpsTransform | None = None) -> WarpedImage:
    """The target as seen from the reference frame through the plane ``c``.

    Without a TPS this is the plain backward warp through ``h``; with one,
    reference pixels pass through the plane and the target-side refinement.
    """
    hh, ww = shape[:2]
    ys, xs = np.mgrid[0:hh, 0:ww].astype(float)
    if tps_tgt is None:
        u, v = _apply_matrix(h.m, xs, ys)
    else:
        h_ref, h_tgt = decompose(h, c, ww, hh)
        px, py = _apply_matrix(invert(h_ref).m, xs, ys)
        q = tps_apply(tps_inverse(tps_tgt), np.stack([px, py], axis=-1))
        u, v = _apply_matrix(h_tgt.m, q[..., 0], q[..., 1])
    pix, mask = sample(i_tgt, u, v)
    return WarpedImage(pix, mask, (0.0, 0.0))


def composite_average(a: WarpedImage, b: WarpedImage) -> np.ndarray:
    """Mean over the overlap, single view elsewhere, zero where neither is valid."""
    if a.pixels.shape != b.pixels.shape or a.mask.shape != b.mask.shape:
        raise CanvasMismatch(f"canvases differ: {a.pixels.shape} vs {b.pixels.shape}")
    ma, mb = a.mask, b.mask
    if a.pixels.ndim == 3:
        ma, mb = ma[..., None], mb[..., None]
    total = ma + mb
    num = a.pixels * ma + b.pixels * mb
    out = np.zeros_like(num)
    np.divide(num, total, out=out, where=total > 0)
    return out


def local_refinement(flow, h: Homography, c, w, h_px, cell: int, u: int = 12, v: int = 12):
    """Target-side TPS whose control points follow the correlation flow.

    A classical stand-in for a learned local warp: the flow is bilinearly
    upsampled to the plane control grid, median filtered, and residuals
    larger than one cell are discarded.  Returns None when nothing moves.
    """
    h_ref, h_tgt = decompose(h, c, w, h_px)
    grid = control_grid(w, h_px, u, v)
    plane_pts = grid.reshape(-1, 2)
    ref_pts = h_ref.apply(plane_pts)
    rows, cols = flow.shape
    fx = ndimage.map_coordinates(flow.flow[..., 0], [ref_pts[:, 1] / cell - 0.5, ref_pts[:, 0] / cell - 0.5],
                                 order=1, mode="nearest")
    fy = ndimage.map_coordinates(flow.flow[..., 1], [ref_pts[:, 1] / cell - 0.5, ref_pts[:, 0] / cell - 0.5],
                                 order=1, mode="nearest")
    observed = ref_pts + np.stack([fx, fy], axis=-1) * cell
    predicted = h_tgt.apply(plane_pts)
    resid = (observed - predicted).reshape(u + 1, v + 1, 2)
    resid = np.stack([ndimage.median_filter(resid[..., k], size=3, mode="nearest") for k in range(2)], axis=-1)
    resid[np.linalg.norm(resid, axis=-1) > cell] = 0.0
    if not np.any(resid):
        return None
    moved = (predicted.reshape(u + 1, v + 1, 2) + resid).reshape(-1, 2)
    # forward TPS maps where the plane should sample the target to the plane point
    return tps_solve(invert(h_tgt).apply(moved), plane_pts)

