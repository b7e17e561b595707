"""Dual feature extraction, global correlation flow, sigma fusion and search.

Two hand-crafted extractors stand in for the trainable and frozen branches:

* extractor A, gradient-orientation and intensity histograms around each
  cell;
* extractor B, a pooled census signature that only depends on the order
  of pixel intensities and is therefore unchanged by monotone photometric
  maps.

Each branch is matched globally into a per-cell flow, the two flows are
blended with a factor ``sigma`` and a homography is fitted robustly to the
blend.  ``sigma`` is chosen by ternary search on photometric alignment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .distortion import to_luma
from .errors import DimensionMismatch, ImageTooSmall, InsufficientMatches, NoConsensus, NonFiniteObjective
from .homography import Homography, canonical

DEFAULT_CELL = 16
MIN_CONFIDENCE = 0.05
# neighbourhood block used when matching for homography estimation
MATCH_SUPPORT = 3
TEXTURELESS_STD = 1e-4
# pixel lattice spacing of the photometric objective during the sigma search
OBJECTIVE_STRIDE = 4
# fits covering less of either frame than this are scored as failed
MIN_OVERLAP = 0.2
# RANSAC stops once an all-inlier sample was drawn with this probability
RANSAC_CONFIDENCE = 0.999
# Gauss-Newton stops once an update moves parameters less than this (unit coords)
GN_STEP_TOL = 1e-5
GRADIENT_BLUR = 1.0
# offsets of the 5x5 census lattice, centre excluded
CENSUS_OFFSETS = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3) if (dy, dx) != (0, 0)]


@dataclass(frozen=True)
class FeatureMap:
    """Descriptor grid of shape ``(rows, cols, channels)``."""

    data: np.ndarray

    @property
    def shape(self):
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_chw(cls, arr) -> "FeatureMap":
        """Build from a channel-first tensor, L2-normalizing each cell."""
        data = np.moveaxis(np.asarray(arr, dtype=float), 0, -1)
        return cls(_l2(data))


@dataclass(frozen=True)
class CorrelationFlow:
    """Per-cell displacement (in cells) from reference to target, with confidence."""

    flow: np.ndarray
    confidence: np.ndarray

    @property
    def shape(self):
        return self.confidence.shape


@dataclass(frozen=True)
class SigmaSearchConfig:
    range_lo: float = -1.0
    range_hi: float = 2.0
    iters: int = 10

    def __post_init__(self):
        if not self.range_lo < self.range_hi:
            raise ValueError("sigma range must satisfy lo < hi")
        if int(self.iters) < 1:
            raise ValueError("sigma search needs at least one iteration")


def _l2(data):
    norm = np.linalg.norm(data, axis=-1, keepdims=True)
    out = np.zeros_like(data)
    np.divide(data, norm, out=out, where=norm > 1e-12)
    return out


def _zero_mean_l2(data):
    return _l2(data - data.mean(axis=-1, keepdims=True))


def _check_size(lum, cell):
    if cell < 4:
        raise ImageTooSmall("cell size must be at least 4 px")
    if lum.shape[0] < cell or lum.shape[1] < cell:
        raise ImageTooSmall(f"image {lum.shape} smaller than one {cell}px cell")


def _pool_weights(n_px, n_cells, cell, sigma):
    # Gaussian window around each cell centre, renormalized inside the frame
    centres = (np.arange(n_cells) + 0.5) * cell - 0.5
    w = np.exp(-0.5 * ((np.arange(n_px)[None, :] - centres[:, None]) / sigma) ** 2)
    return w / w.sum(axis=1, keepdims=True)


def pool_cells(channels, cell: int, sigma: float | None = None) -> np.ndarray:
    """Gaussian-weighted average of (H, W, K) channels around every cell centre.

    The window (default ``sigma = cell``) reaches into neighbouring cells,
    which keeps descriptors stable when the cell grids of two views are
    misaligned by a fraction of a cell.
    """
    h, w = channels.shape[:2]
    sigma = float(cell if sigma is None else sigma)
    wy = _pool_weights(h, h // cell, cell, sigma)
    wx = _pool_weights(w, w // cell, cell, sigma)
    tmp = np.tensordot(wy, channels, axes=(1, 0))
    return np.einsum("cx,rxk->rck", wx, tmp)


def _scatter2(shape, bins, left, right, w_left, w_right):
    """(..., bins) array with two weights per pixel placed at distinct bins."""
    out = np.zeros((int(np.prod(shape)), bins))
    rows = np.arange(out.shape[0])
    out[rows, left.ravel()] = w_left.ravel()
    out[rows, right.ravel()] = w_right.ravel()
    return out.reshape(tuple(shape) + (bins,))


def orientation_channels(gx, gy, bins: int = 8) -> np.ndarray:
    """Gradient magnitude split into ``bins`` wrapping orientation bins (soft)."""
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (2 * np.pi) * bins
    mag = np.hypot(gx, gy)
    left = np.floor(ang)
    frac = ang - left
    left = left.astype(int) % bins
    return _scatter2(gx.shape, bins, left, (left + 1) % bins, mag * (1 - frac), mag * frac)


def intensity_channels(lum, bins: int = 8) -> np.ndarray:
    """Soft membership of each pixel in ``bins`` intensity bins over [0, 1].

    Values beyond the outer bin centres go entirely to the outer bin.
    """
    pos = np.clip(np.clip(lum, 0.0, 1.0) * bins - 0.5, 0.0, bins - 1.0)
    left = np.minimum(np.floor(pos).astype(int), bins - 2)
    frac = pos - left
    return _scatter2(lum.shape, bins, left, left + 1, 1 - frac, frac)


def extract_features_a(img, cell: int = DEFAULT_CELL) -> FeatureMap:
    """18-d per-cell descriptor: orientation histogram, intensity histogram, mean, std.

    Both histograms are mean-subtracted before normalization so unrelated
    cells score near zero similarity instead of near one.  The orientation
    block is normalized on its own to norm ``1/sqrt(2)`` and the intensity
    block with mean and std shares the other half, which leaves the
    orientation block dependent on gradients alone.
    """
    lum = to_luma(img)
    _check_size(lum, cell)
    gy, gx = np.gradient(ndimage.gaussian_filter(lum, GRADIENT_BLUR, mode="reflect"))
    orient = pool_cells(orientation_channels(gx, gy), cell)
    inten = pool_cells(intensity_channels(lum), cell)
    moments = pool_cells(np.stack([lum, lum * lum], axis=-1), cell)
    mean = moments[..., 0]
    std = np.sqrt(np.maximum(moments[..., 1] - mean**2, 0.0))

    rest = np.concatenate([_zero_mean_l2(inten), 2.0 * (mean[..., None] - 0.5), 2.0 * std[..., None]], axis=-1)
    desc = np.concatenate([_zero_mean_l2(orient), _l2(rest)], axis=-1) / np.sqrt(2.0)
    desc[std < TEXTURELESS_STD] = 0.0
    return FeatureMap(desc)


def census_stride(cell: int) -> int:
    # comparisons span about three quarters of a cell
    return max(1, int(round(0.375 * cell)))


def census_signs(lum, stride: int = 1) -> np.ndarray:
    """Signs of neighbour-minus-centre on a 5x5 lattice with spacing ``stride``, (H, W, 24)."""
    p = 2 * stride
    pad = np.pad(lum, p, mode="edge")
    h, w = lum.shape
    out = np.empty((h, w, len(CENSUS_OFFSETS)), dtype=np.float32)
    for k, (dy, dx) in enumerate(CENSUS_OFFSETS):
        oy, ox = p + dy * stride, p + dx * stride
        nb = pad[oy:oy + h, ox:ox + w]
        out[..., k] = (nb > lum).astype(np.float32) - (nb < lum)
    return out


def extract_features_b(img, cell: int = DEFAULT_CELL) -> FeatureMap:
    """24-d pooled census descriptor; invariant to strictly monotone intensity maps."""
    lum = to_luma(img)
    _check_size(lum, cell)
    pooled = pool_cells(census_signs(lum, census_stride(cell)), cell)
    return FeatureMap(_zero_mean_l2(pooled))


def _aggregate_support(sim, rows, cols, support):
    """Average each (reference, target) similarity over a ``support x support``
    block of neighbouring reference cells displaced by the same amount.
    Neighbours that leave either grid contribute zero."""
    pad = support // 2
    vol = np.pad(sim.reshape(rows, cols, rows, cols), pad)
    acc = np.zeros((rows, cols, rows, cols))
    for dr in range(support):
        for dc in range(support):
            acc += vol[dr:dr + rows, dc:dc + cols, dr:dr + rows, dc:dc + cols]
    return acc.reshape(rows * cols, rows * cols) / support ** 2


def correlation_flow(f_ref: FeatureMap, f_tgt: FeatureMap, support: int = 1) -> CorrelationFlow:
    """Global cosine matching of every reference cell against all target cells.

    Ties resolve to the lowest linear target index.  Confidence is the gap
    between the best and second-best similarity.  ``support > 1`` (odd)
    scores each candidate displacement over a block of neighbouring cells,
    which separates the repeats of periodic texture.
    """
    if f_ref.data.shape != f_tgt.data.shape:
        raise DimensionMismatch(f"feature maps {f_ref.data.shape} vs {f_tgt.data.shape}")
    if support < 1 or support % 2 == 0:
        raise ValueError(f"support must be a positive odd number, got {support}")
    rows, cols, ch = f_ref.data.shape
    a = f_ref.data.reshape(-1, ch)
    b = f_tgt.data.reshape(-1, ch)
    sim = a @ b.T
    if support > 1:
        sim = _aggregate_support(sim, rows, cols, support)
    best = np.argmax(sim, axis=1)
    top1 = sim[np.arange(len(best)), best]
    if sim.shape[1] > 1:
        top2 = np.partition(sim, -2, axis=1)[:, -2]
    else:
        top2 = np.zeros_like(top1)
    conf = np.clip(top1 - top2, 0.0, 1.0)

    ref_idx = np.arange(rows * cols)
    flow = np.stack([best % cols - ref_idx % cols, best // cols - ref_idx // cols], axis=-1).astype(float)
    empty = np.linalg.norm(a, axis=1) == 0
    flow[empty] = 0.0
    conf[empty] = 0.0
    return CorrelationFlow(flow.reshape(rows, cols, 2), conf.reshape(rows, cols))


def fuse(a: CorrelationFlow, b: CorrelationFlow, sigma: float) -> CorrelationFlow:
    """``(1 - sigma) * a + sigma * b``; sigma may lie outside [0, 1].

    Confidence is the minimum over the branches that carry nonzero weight,
    so ``sigma = 0`` and ``sigma = 1`` return the pure branches unchanged.
    """
    if a.flow.shape != b.flow.shape:
        raise DimensionMismatch("flows have different grids")
    if sigma == 0:
        conf = a.confidence.copy()
    elif sigma == 1:
        conf = b.confidence.copy()
    else:
        conf = np.minimum(a.confidence, b.confidence)
    return CorrelationFlow((1.0 - sigma) * a.flow + sigma * b.flow, conf)


def flow_from_homography(h: Homography, rows: int, cols: int, cell: int = DEFAULT_CELL) -> CorrelationFlow:
    """Exact (non-integer) cell flow induced by ``h``, full confidence."""
    ref = cell_centres(rows, cols, cell)
    flow = (h.apply(ref) - ref) / cell
    return CorrelationFlow(flow, np.ones((rows, cols)))


def cell_centres(rows, cols, cell):
    ys, xs = np.mgrid[0:rows, 0:cols]
    return np.stack([(xs + 0.5) * cell, (ys + 0.5) * cell], axis=-1).astype(float)


# --- robust fitting -----------------------------------------------------

def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = np.sqrt(2) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def dlt(src, dst) -> np.ndarray:
    """Normalized least-squares DLT for N >= 4 correspondences (src -> dst)."""
    t1, t2 = _normalizer(src), _normalizer(dst)
    s = src @ t1[:2, :2].T + t1[:2, 2]
    d = dst @ t2[:2, :2].T + t2[:2, 2]
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1
    a[0::2, 6:8] = -d[:, :1] * s
    a[0::2, 8] = -d[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1
    a[1::2, 6:8] = -d[:, 1:] * s
    a[1::2, 8] = -d[:, 1]
    _, _, vt = np.linalg.svd(a)
    return canonical(np.linalg.inv(t2) @ vt[-1].reshape(3, 3) @ t1)


def _minimal_batch(src, dst):
    """Solve many 4-point problems at once; src, dst are (B, 4, 2) normalized."""
    b = src.shape[0]
    a = np.zeros((b, 8, 8))
    rhs = np.zeros((b, 8))
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    a[:, 0::2, 0] = x
    a[:, 0::2, 1] = y
    a[:, 0::2, 2] = 1
    a[:, 0::2, 6] = -u * x
    a[:, 0::2, 7] = -u * y
    a[:, 1::2, 3] = x
    a[:, 1::2, 4] = y
    a[:, 1::2, 5] = 1
    a[:, 1::2, 6] = -v * x
    a[:, 1::2, 7] = -v * y
    rhs[:, 0::2] = u
    rhs[:, 1::2] = v
    ok = np.abs(np.linalg.det(a)) > 1e-10
    sol = np.zeros((b, 8))
    if ok.any():
        sol[ok] = np.linalg.solve(a[ok], rhs[ok][..., None])[..., 0]
    return np.concatenate([sol, np.ones((b, 1))], axis=1).reshape(b, 3, 3), ok


def _project(m, pts):
    """Apply a batch of (B, 3, 3) matrices to (N, 2) points -> (B, N, 2)."""
    hom = np.einsum("bij,nj->bni", m, np.c_[pts, np.ones(len(pts))])
    den = hom[..., 2:]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hom[..., :2] / den
    out[~np.isfinite(out)] = np.inf
    return out


def fit_homography_robust(src, dst, threshold: float, seed: int = 0, hypotheses: int = 1000,
                          min_inlier_ratio: float = 0.25) -> tuple[Homography, np.ndarray]:
    """Seeded consensus fit of ``src -> dst`` followed by least-squares refits.

    Returns the homography and the boolean inlier mask under it.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    if n < 4:
        raise InsufficientMatches(f"{n} correspondences, need at least 4")
    rng = np.random.default_rng(seed)

    t1, t2 = _normalizer(src), _normalizer(dst)
    sn = src @ t1[:2, :2].T + t1[:2, 2]
    dn = dst @ t2[:2, :2].T + t2[:2, 2]
    t2_inv = np.linalg.inv(t2)

    best_count, best_model = -1, None
    for start in range(0, hypotheses, 250):
        # four distinct indices per hypothesis: the smallest of n random keys
        chunk = np.argpartition(rng.random((min(250, hypotheses - start), n)), 3, axis=1)[:, :4]
        mn, ok = _minimal_batch(sn[chunk], dn[chunk])
        models = t2_inv @ mn @ t1
        err = np.linalg.norm(_project(models, src) - dst, axis=-1)
        counts = np.where(ok, (err <= threshold).sum(axis=1), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_model = int(counts[k]), models[k]
        if start + 250 >= _required_hypotheses(best_count / n):
            break
    if best_model is None or best_count < max(4, min_inlier_ratio * n):
        raise NoConsensus(f"best consensus {max(best_count, 0)}/{n} below {min_inlier_ratio:.0%}")

    inliers = _residuals(best_model, src, dst) <= threshold
    model = best_model
    for _ in range(5):
        refit = dlt(src[inliers], dst[inliers])
        new = _residuals(refit, src, dst) <= threshold
        if new.sum() < 4:
            break
        model = refit
        if np.array_equal(new, inliers):
            break
        inliers = new
    inliers = _residuals(model, src, dst) <= threshold
    if inliers.sum() < max(4, min_inlier_ratio * n):
        raise NoConsensus("refit lost consensus")
    return Homography(model), inliers


def _required_hypotheses(inlier_ratio: float) -> float:
    """Samples needed to draw one all-inlier quadruple with RANSAC_CONFIDENCE."""
    all_in = inlier_ratio ** 4
    if all_in <= 0:
        return np.inf
    if all_in >= 1:
        return 1
    return np.log(1 - RANSAC_CONFIDENCE) / np.log(1 - all_in)


def _residuals(m, src, dst):
    return np.linalg.norm(_project(m[None], src)[0] - dst, axis=-1)


def flow_correspondences(flow: CorrelationFlow, cell: int, min_confidence: float = MIN_CONFIDENCE):
    """Reference and target pixel positions of the confident cells."""
    rows, cols = flow.shape
    ref = cell_centres(rows, cols, cell)
    keep = flow.confidence > min_confidence
    return ref[keep], ref[keep] + flow.flow[keep] * cell


def flow_to_homography(flow: CorrelationFlow, cell: int = DEFAULT_CELL, seed: int = 0) -> Homography:
    """Robust homography (reference -> target pixels) from a cell flow."""
    src, dst = flow_correspondences(flow, cell)
    if len(src) < 8:
        raise InsufficientMatches(f"only {len(src)} confident cells, need 8")
    h, _ = fit_homography_robust(src, dst, threshold=0.75 * cell, seed=seed)
    return h


# --- sigma search ---------------------------------------------------------

def ternary_search_sigma(objective, cfg: SigmaSearchConfig | None = None, trace: list | None = None):
    """Maximize ``objective`` over ``[range_lo, range_hi]`` by two-probe ternary search.

    Returns ``(sigma, value)`` at the midpoint of the final bracket.  When
    ``trace`` is a list, the bracket after every iteration is appended.
    """
    cfg = cfg or SigmaSearchConfig()
    lo, hi = float(cfg.range_lo), float(cfg.range_hi)

    def f(s):
        v = float(objective(s))
        if not np.isfinite(v):
            raise NonFiniteObjective(f"objective is {v} at sigma={s}")
        return v

    for _ in range(int(cfg.iters)):
        width = hi - lo
        m1 = lo + width / 3.0
        m2 = hi - width / 3.0
        if f(m1) < f(m2):
            lo = m1
        else:
            hi = m2
        if trace is not None:
            trace.append((lo, hi))
    mid = 0.5 * (lo + hi)
    return mid, f(mid)


def fixed_sigma_sweep(objective, cfg: SigmaSearchConfig | None = None, steps: int = 10):
    """Evaluate ``steps`` evenly spaced sigma values and keep the best (debug baseline)."""
    cfg = cfg or SigmaSearchConfig()
    grid = np.linspace(cfg.range_lo, cfg.range_hi, int(steps))
    vals = [float(objective(s)) for s in grid]
    k = int(np.argmax(vals))
    return float(grid[k]), vals[k], list(zip(grid.tolist(), vals))


# --- photometric refinement ---------------------------------------------

def _pixel_to_unit(w, h):
    """Pixel-centre coordinates to [-1, 1] at any pyramid level."""
    return np.array([[2.0 / w, 0, 1.0 / w - 1], [0, 2.0 / h, 1.0 / h - 1], [0, 0, 1.0]])


def _downsample(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def refine_homography(i_ref, i_tgt, h: Homography, levels: int = 3, iters=(20, 10, 6),
                      stride: int = 3, blur: float = 1.0) -> Homography:
    """Coarse-to-fine Gauss-Newton on photometric error, starting from ``h``.

    Minimizes ``sum (I_tgt(h x) - I_ref(x))^2`` over reference pixels whose
    image lies inside the target.  Returns ``h`` unchanged if the refinement
    does not lower the error.
    """
    ref = ndimage.gaussian_filter(to_luma(i_ref), blur)
    tgt = ndimage.gaussian_filter(to_luma(i_tgt), blur)
    pyr = [(ref, tgt)]
    for _ in range(levels - 1):
        r, t = pyr[-1]
        if min(r.shape) < 32 or min(t.shape) < 32:
            break
        pyr.append((_downsample(r), _downsample(t)))

    t0_ref = _pixel_to_unit(ref.shape[1], ref.shape[0])
    t0_tgt = _pixel_to_unit(tgt.shape[1], tgt.shape[0])
    m = t0_tgt @ h.m @ np.linalg.inv(t0_ref)
    m = m / m[2, 2]
    start_err = _photometric(pyr[0][0], pyr[0][1], m, 2)

    for level in range(len(pyr) - 1, -1, -1):
        r, t = pyr[level]
        n_it = iters[min(len(pyr) - 1 - level, len(iters) - 1)]
        m = _gauss_newton(r, t, m, n_it, stride if level == 0 else 1)

    if not (_photometric(pyr[0][0], pyr[0][1], m, 2) < start_err):
        return h
    out = np.linalg.inv(t0_tgt) @ m @ t0_ref
    try:
        return Homography(out)
    except ValueError:
        return h


def _unit_grid(shape, stride):
    """Unit coordinates of a pixel sub-lattice and the slice that selects it."""
    hh, ww = shape
    ys, xs = np.mgrid[0:hh:stride, 0:ww:stride].astype(float)
    t = _pixel_to_unit(ww, hh)
    sl = (slice(0, hh, stride), slice(0, ww, stride))
    return xs.ravel() * t[0, 0] + t[0, 2], ys.ravel() * t[1, 1] + t[1, 2], sl


def _sample_unit(img, u, v):
    hh, ww = img.shape
    px = (u + 1) * ww / 2 - 0.5
    py = (v + 1) * hh / 2 - 0.5
    inside = (px >= 0) & (px <= ww - 1) & (py >= 0) & (py <= hh - 1)
    vals = ndimage.map_coordinates(img, [py, px], order=1, mode="nearest")
    return vals, inside, px, py


def _photometric(ref, tgt, m, stride):
    x, y, sl = _unit_grid(ref.shape, stride)
    den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if np.any(np.abs(den) < 1e-9):
        return np.inf
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den
    vals, inside, _, _ = _sample_unit(tgt, u, v)
    if inside.sum() < 16:
        return np.inf
    r = (vals - ref[sl].ravel())[inside]
    return float(np.mean(r * r))


def _gauss_newton(ref, tgt, m, n_iters, stride):
    x, y, sl = _unit_grid(ref.shape, stride)
    target = ref[sl].ravel()
    gy, gx = np.gradient(tgt)
    hh, ww = tgt.shape
    lam = 1e-3
    err = _photometric(ref, tgt, m, stride)
    for _ in range(n_iters):
        den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
        u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den
        v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den
        vals, inside, px, py = _sample_unit(tgt, u, v)
        if inside.sum() < 16:
            break
        ix = ndimage.map_coordinates(gx, [py, px], order=1, mode="nearest") * ww / 2
        iy = ndimage.map_coordinates(gy, [py, px], order=1, mode="nearest") * hh / 2
        xi, yi, ui, vi, di = x[inside], y[inside], u[inside], v[inside], den[inside]
        gxi, gyi = ix[inside], iy[inside]
        jac = np.stack([
            gxi * xi / di, gxi * yi / di, gxi / di,
            gyi * xi / di, gyi * yi / di, gyi / di,
            -(gxi * ui + gyi * vi) * xi / di, -(gxi * ui + gyi * vi) * yi / di,
        ], axis=1)
        res = vals[inside] - target[inside]
        jtj = jac.T @ jac
        jtr = jac.T @ res
        improved = False
        for _ in range(6):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = m + np.append(delta, 0.0).reshape(3, 3)
            cand_err = _photometric(ref, tgt, cand, stride)
            if cand_err < err:
                m, err = cand, cand_err
                lam = max(lam / 10, 1e-7)
                improved = True
                break
            lam *= 10
        if not improved or np.max(np.abs(delta)) < GN_STEP_TOL:
            break
    return m


# --- dual pipeline --------------------------------------------------------

class DualMatcher:
    """Both branch flows of an image pair and the sigma objective built on them.

    ``features`` optionally supplies ``(a_ref, a_tgt, b_ref, b_tgt)``
    FeatureMaps in place of the extractors.  Objective values are cached by
    the confident part of the fused flow, since nearby sigmas often fuse to
    the same correspondences.
    """

    def __init__(self, i_ref, i_tgt, cell: int = DEFAULT_CELL, seed: int = 0, features=None, weights=None):
        from .losses import LossWeights

        self.lum_ref, self.lum_tgt = to_luma(i_ref), to_luma(i_tgt)
        if self.lum_ref.shape != self.lum_tgt.shape:
            raise DimensionMismatch(f"image sizes differ: {self.lum_ref.shape} vs {self.lum_tgt.shape}")
        self.cell, self.seed = cell, seed
        self.weights = weights or LossWeights()
        if features is None:
            features = (extract_features_a(self.lum_ref, cell), extract_features_a(self.lum_tgt, cell),
                        extract_features_b(self.lum_ref, cell), extract_features_b(self.lum_tgt, cell))
        a_ref, a_tgt, b_ref, b_tgt = features
        self.flow_a = correlation_flow(a_ref, a_tgt, MATCH_SUPPORT)
        self.flow_b = correlation_flow(b_ref, b_tgt, MATCH_SUPPORT)
        self._cache: dict = {}

    def fused(self, sigma: float) -> CorrelationFlow:
        return fuse(self.flow_a, self.flow_b, sigma)

    def _evaluate(self, sigma):
        from .losses import overlap_alignment_error

        fused = self.fused(sigma)
        keep = fused.confidence > MIN_CONFIDENCE
        key = np.round(fused.flow[keep], 9).tobytes() + keep.tobytes()
        if key not in self._cache:
            try:
                h = flow_to_homography(fused, self.cell, self.seed)
                loss, overlap = overlap_alignment_error(self.lum_ref, self.lum_tgt, h, self.weights,
                                                        OBJECTIVE_STRIDE)
                if overlap < MIN_OVERLAP:
                    raise NoConsensus(f"fit leaves only {overlap:.0%} of the frame overlapping")
                self._cache[key] = (-loss, h)
            except (InsufficientMatches, NoConsensus, ValueError):
                self._cache[key] = (-FAILED_FIT_LOSS, None)
        return self._cache[key]

    def objective(self, sigma: float) -> float:
        """Negative overlap-averaged photometric error of the homography fitted at ``sigma``."""
        return self._evaluate(sigma)[0]

    def homography(self, sigma: float) -> Homography | None:
        return self._evaluate(sigma)[1]


def estimate_homography_dual(i_ref, i_tgt, cfg: SigmaSearchConfig | None = None, cell: int = DEFAULT_CELL,
                             seed: int = 0, features=None, refine: bool = True, info: dict | None = None):
    """Homography (reference -> target) and sigma from both feature branches.

    ``sigma`` maximizes :meth:`DualMatcher.objective`; the pure branches
    (sigma 0 and 1) are always tried as well because the objective need not
    be unimodal.  When ``info`` is a dict it receives the bracket trace, the
    objective at the chosen sigma, the unrefined homography and the fused
    flow.
    """
    cfg = cfg or SigmaSearchConfig()
    matcher = DualMatcher(i_ref, i_tgt, cell, seed, features)
    trace: list = []
    sigma, value = ternary_search_sigma(matcher.objective, cfg, trace)
    for guard in (0.0, 1.0):
        if cfg.range_lo <= guard <= cfg.range_hi:
            v = matcher.objective(guard)
            if v > value:
                sigma, value = guard, v
    h = matcher.homography(sigma)
    if h is None:
        raise NoConsensus("no sigma in the search range yields a consistent homography")
    coarse = h
    if refine:
        h = refine_homography(matcher.lum_ref, matcher.lum_tgt, h)
    if info is not None:
        from .losses import alignment_loss_h

        info.update(brackets=trace, objective=value, coarse=coarse, flow=matcher.fused(sigma),
                    refined_objective=-alignment_loss_h(matcher.lum_ref, matcher.lum_tgt, h, matcher.weights))
    return h, sigma


# loss assigned to sigma values whose fused flow admits no consistent fit;
# exceeds any alignment loss of [0, 1] images with the default weights
FAILED_FIT_LOSS = 10.0
