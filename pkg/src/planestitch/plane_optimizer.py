"""Search for the decomposition coefficients with the least semantic distortion.

The objective is linear in the eight vertex scores (four per view), because
each distortion map is a bilinear blend of its vertex scores.  ``PlaneObjective``
exploits that: it precomputes ``mean(w_i * S)`` for every corner weight map
once, after which one evaluation costs two quad scorings.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distortion import bilinear_weights, distortion_map, final_scores, semantic_distortion_loss
from .errors import DegenerateQuad, NonFiniteObjective
from .homography import DecompositionCoefficients, Homography, check_quad, decompose, invert, rect_corners, warp_quad

# uniform and middle planes tried alongside cfg.init
_EXTRA_STARTS = (1.0, 0.5)
_MAX_HALVINGS = 5


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 50
    init: tuple = (0.0, 0.0, 0.0, 0.0)
    fd_step: float = 1e-3
    step0: float = 0.2
    decay: float = 0.8
    tol: float = 1e-6
    seed_levels: tuple = (0.0, 0.5, 1.0)
    descents: int = 3

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        for name in ("fd_step", "step0", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if int(self.descents) < 1:
            raise ValueError("descents must be >= 1")
        if len(self.init) != 4:
            raise ValueError("init needs four coefficients")


@dataclass
class OptimizerTrace:
    iters: list = field(default_factory=list)
    final_c: DecompositionCoefficients | None = None
    final_loss: float = float("nan")

    @property
    def losses(self) -> list:
        return [loss for _, loss in self.iters]

    def to_json(self) -> dict:
        return {
            "iters": [{"c": [float(v) for v in c], "loss": float(loss)} for c, loss in self.iters],
            "final_c": [float(v) for v in self.final_c.c],
            "final_loss": float(self.final_loss),
        }


def _normalized_quad(h: Homography, w, h_px):
    # scoring in frame-normalized units keeps the identity warp of a
    # non-square frame at zero distortion; for square frames it is a
    # uniform scale and changes nothing
    return warp_quad(h, w, h_px) / np.array([w, h_px])


def plane_quads(h: Homography, c, w, h_px):
    """Frame-normalized quads of both views as drawn on the plane ``c``.

    The decomposed warps map plane to image, so a view's content lands on
    the plane through the inverse warp.
    """
    h_ref, h_tgt = decompose(h, c, w, h_px)
    return _normalized_quad(invert(h_ref), w, h_px), _normalized_quad(invert(h_tgt), w, h_px)


def evaluate_plane(h: Homography, c, s_ref, s_tgt, w: int, h_px: int) -> float:
    """L_coef of the plane ``c``: distortion maps of both views weighted by saliency."""
    q_ref, q_tgt = plane_quads(h, c, w, h_px)
    d_ref = distortion_map(final_scores(q_ref), w, h_px)
    d_tgt = distortion_map(final_scores(q_tgt), w, h_px)
    return semantic_distortion_loss(d_ref, s_ref, d_tgt, s_tgt)


class PlaneObjective:
    """Fast equivalent of :func:`evaluate_plane` for repeated evaluation.

    Works in frame-normalized coordinates: with ``M`` the map from the unit
    square to the scaled 4-pt quad, the target view lands on ``M^-1(square)``
    and the reference view on ``M^-1(square + offsets)``.
    """

    def __init__(self, h: Homography, s_ref, s_tgt, w: int, h_px: int):
        self.h = h
        self.w, self.h_px = w, h_px
        weights = bilinear_weights(w, h_px)
        self.a_ref = np.array([np.mean(wi * s_ref) for wi in weights])
        self.a_tgt = np.array([np.mean(wi * s_tgt) for wi in weights])
        self._unit = rect_corners(1.0, 1.0)
        self._quad_h = warp_quad(h, w, h_px) / np.array([w, h_px], dtype=float)
        self._delta = self._quad_h - self._unit

    def quads(self, c):
        c = np.asarray(c, dtype=float)
        scaled = self._unit + c[:, None] * self._delta
        check_quad(scaled)
        m_inv = np.linalg.inv(_unit_square_homography(scaled))
        pts = np.concatenate([self._unit, self._quad_h]) @ m_inv[:, :2].T + m_inv[:, 2]
        if np.any(np.abs(pts[:, 2]) < 1e-12):
            raise DegenerateQuad("view quad reaches infinity")
        pts = pts[:, :2] / pts[:, 2:]
        return pts[4:], pts[:4]

    def __call__(self, c) -> float:
        q_ref, q_tgt = self.quads(c)
        return float(final_scores(q_ref).final @ self.a_ref + final_scores(q_tgt).final @ self.a_tgt)


def _unit_square_homography(q) -> np.ndarray:
    """Matrix mapping the unit square corners (TL, TR, BL, BR) onto ``q``."""
    # closed form for the square-to-quad map
    (x0, y0), (x1, y1), (x3, y3), (x2, y2) = q
    sx = x0 - x1 + x2 - x3
    sy = y0 - y1 + y2 - y3
    dx1, dx2 = x1 - x2, x3 - x2
    dy1, dy2 = y1 - y2, y3 - y2
    den = dx1 * dy2 - dx2 * dy1
    if abs(den) < 1e-12:
        raise DegenerateQuad("quad collapses")
    g = (sx * dy2 - dx2 * sy) / den
    hh = (dx1 * sy - sx * dy1) / den
    return np.array([
        [x1 - x0 + g * x1, x3 - x0 + hh * x3, x0],
        [y1 - y0 + g * y1, y3 - y0 + hh * y3, y0],
        [g, hh, 1.0],
    ])


def _gradient(f, c, f0, step):
    g = np.zeros(4)
    for i in range(4):
        lo = max(c[i] - step, 0.0)
        hi = min(c[i] + step, 1.0)
        cp, cm = c.copy(), c.copy()
        cp[i], cm[i] = hi, lo
        fp = f(cp) if hi != c[i] else f0
        fm = f(cm) if lo != c[i] else f0
        g[i] = (fp - fm) / (hi - lo)
    return g


def _safe(f):
    def wrapped(c):
        try:
            v = f(c)
        except ValueError:
            return np.inf
        return v if np.isfinite(v) else np.inf

    return wrapped


def optimize_coefficients(h: Homography, s_ref, s_tgt, w: int, h_px: int,
                          cfg: OptimizerConfig | None = None, objective=None) -> OptimizerTrace:
    """Projected finite-difference descent on L_coef with a decaying step.

    Seeds are ``cfg.init``, the reference plane (c = 1), the middle plane
    (c = 0.5) and the ``cfg.seed_levels`` lattice; descent runs from the
    ``cfg.descents`` best seeds and the best run is returned, so the result
    never scores worse than either baseline plane.  ``objective`` overrides
    the saliency-weighted loss with any callable of the four coefficients.
    """
    cfg = cfg or OptimizerConfig()
    f = objective if objective is not None else PlaneObjective(h, s_ref, s_tgt, w, h_px)
    f = _safe(f)

    c0 = np.clip(np.asarray(cfg.init, dtype=float), 0.0, 1.0)
    loss0 = f(c0)
    if not np.isfinite(loss0):
        raise NonFiniteObjective("objective is not finite at the initial coefficients")

    # seeds: init first so ties keep it, then the reference and middle planes,
    # then the coarse lattice that catches minima sitting on box corners
    seeds = [(loss0, 0, c0)]
    for t in _EXTRA_STARTS:
        cand = np.full(4, t)
        seeds.append((f(cand), len(seeds), cand))
    for cand in _lattice(cfg.seed_levels):
        seeds.append((f(cand), len(seeds), cand))
    seeds.sort(key=lambda s: (s[0], s[1]))

    best = None
    for loss, _, c in seeds[: max(1, cfg.descents)]:
        if not np.isfinite(loss):
            break
        run = _descend(f, c.copy(), loss, cfg)
        if best is None or run[-1][1] < best[-1][1]:
            best = run
    trace = OptimizerTrace(iters=best)
    trace.final_c = DecompositionCoefficients(best[-1][0])
    trace.final_loss = best[-1][1]
    return trace


def _lattice(levels):
    if not levels:
        return []
    return list(np.array(np.meshgrid(*[levels] * 4, indexing="ij")).reshape(4, -1).T)


def _descend(f, c, loss, cfg):
    iters = [(c.copy(), loss)]
    for k in range(int(cfg.max_iters)):
        g = _gradient(f, c, loss, cfg.fd_step)
        # drop components that would push an active bound outwards
        g[((c <= 0.0) & (g > 0)) | ((c >= 1.0) & (g < 0))] = 0.0
        gnorm = np.linalg.norm(g)
        if not np.isfinite(gnorm) or gnorm == 0.0:
            break
        step = cfg.step0 * cfg.decay**k
        accepted = False
        for _ in range(_MAX_HALVINGS + 1):
            cand = np.clip(c - step * g / gnorm, 0.0, 1.0)
            val = f(cand)
            if val < loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            continue
        gain = loss - val
        c, loss = cand, val
        iters.append((c.copy(), loss))
        if gain < cfg.tol:
            break
    return iters


def grid_minimum(f, levels=(0.0, 0.25, 0.5, 0.75, 1.0)):
    """Exhaustive minimum of ``f`` over ``levels^4``; returns (loss, c)."""
    best = (np.inf, None)
    grid = np.array(np.meshgrid(*[levels] * 4, indexing="ij")).reshape(4, -1).T
    for c in grid:
        try:
            v = f(c)
        except ValueError:
            continue
        if v < best[0]:
            best = (v, c)
    return best
