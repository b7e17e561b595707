"""Synthetic image pairs with a planted homography.

Textures are continuous functions of the plane position built from a
counter-based hash, so the target view is an exact evaluation of the scene
at ``h_true^-1(x)`` instead of a resampled raster, and every pixel depends
only on its coordinates and the seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .homography import Homography, invert, random_homography

TEXTURES = ("perlin", "checker-multiscale", "blob-field")

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class SceneSpec:
    size: int | tuple = 512
    texture: str = "perlin"
    h_magnitude: float = 0.15
    parallax_px: float = 0.0
    gamma: float = 1.0
    brightness: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if not 0.0 <= self.h_magnitude <= 0.3:
            raise ValueError("h_magnitude must lie in [0, 0.3]")
        if self.parallax_px < 0 or self.noise_std < 0:
            raise ValueError("parallax_px and noise_std must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        w, h = self.dims
        if w < 8 or h < 8:
            raise ValueError("size must be at least 8 pixels")

    @property
    def dims(self):
        if isinstance(self.size, (tuple, list)):
            return int(self.size[0]), int(self.size[1])
        return int(self.size), int(self.size)


def _hash(*keys) -> np.ndarray:
    """splitmix64 over a sequence of integer arrays, returned as floats in [0, 1)."""
    acc = np.uint64(0)
    with np.errstate(over="ignore"):
        for k in keys:
            acc = (np.asarray(k).astype(np.int64).astype(np.uint64) + acc * _GOLDEN) ^ (acc >> np.uint64(29))
            z = acc + _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            acc = z ^ (z >> np.uint64(31))
    return (acc >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _lattice_table(key, ix, iy, *extra):
    """Hash every lattice point in the bounding box of ``ix, iy`` once, then gather."""
    x0, y0 = int(ix.min()), int(iy.min())
    gx, gy = np.meshgrid(np.arange(x0, int(ix.max()) + 1), np.arange(y0, int(iy.max()) + 1))
    table = _hash(key, *extra, gx, gy)
    return table[iy - y0, ix - x0]


def value_noise(x, y, key) -> np.ndarray:
    """Smooth lattice noise in [0, 1) with unit wavelength."""
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = _fade(x - x0), _fade(y - y0)
    ix, iy = x0.astype(np.int64), y0.astype(np.int64)
    v00 = _lattice_table(key, ix, iy)
    v10 = _lattice_table(key, ix + 1, iy)
    v01 = _lattice_table(key, ix, iy + 1)
    v11 = _lattice_table(key, ix + 1, iy + 1)
    top = v00 + (v10 - v00) * fx
    bot = v01 + (v11 - v01) * fx
    return top + (bot - top) * fy


def _rotated(x, y, angle, shift):
    c, s = np.cos(angle), np.sin(angle)
    return c * x - s * y + shift[0], s * x + c * y + shift[1]


def _perlin(x, y, seed, channel):
    wavelengths = (96.0, 48.0, 24.0, 12.0, 6.0)
    total = np.zeros_like(x)
    norm = 0.0
    for o, lam in enumerate(wavelengths):
        key = seed * 1000 + channel * 100 + o
        angle = 2 * np.pi * float(_hash(key, 1))
        shift = (1e3 * float(_hash(key, 2)), 1e3 * float(_hash(key, 3)))
        u, v = _rotated(x / lam, y / lam, angle, shift)
        amp = 0.7**o
        total += amp * value_noise(u, v, key)
        norm += amp
    t = total / norm
    # stretch the narrow central distribution of summed octaves
    return np.clip(0.5 + 2.2 * (t - 0.5), 0.0, 1.0)


def _checker(x, y, seed, channel):
    out = np.zeros_like(x)
    for o, period in enumerate((64.0, 16.0)):
        key = seed * 1000 + channel * 100 + o
        u, v = _rotated(x / period, y / period, 0.3 * float(_hash(key, 1)), (float(_hash(key, 2)), 0.0))
        out += np.tanh(6.0 * np.sin(np.pi * u) * np.sin(np.pi * v)) / 2**o
    return 0.5 + out / 3.0


def _blobs(x, y, seed, channel, cell=24.0):
    gx, gy = np.floor(x / cell).astype(np.int64), np.floor(y / cell).astype(np.int64)
    out = np.full_like(x, 0.5)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cx, cy = gx + dx, gy + dy
            px = (cx + _lattice_table(seed, cx, cy, 1)) * cell
            py = (cy + _lattice_table(seed, cx, cy, 2)) * cell
            r = cell * (0.3 + 0.6 * _lattice_table(seed, cx, cy, 3))
            amp = _lattice_table(seed, cx, cy, 4 + channel) - 0.5
            out += amp * np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2 * r * r))
    return np.clip(out, 0.0, 1.0)


_FIELDS = {"perlin": _perlin, "checker-multiscale": _checker, "blob-field": _blobs}


def texture_rgb(kind: str, x, y, seed: int) -> np.ndarray:
    """Texture ``kind`` evaluated at plane positions ``(x, y)``; shape ``x.shape + (3,)``."""
    field = _FIELDS[kind]
    return np.stack([field(x, y, seed, ch) for ch in range(3)], axis=-1)


def planted_homography(rng, w, h, magnitude) -> Homography:
    """Homography whose corner offsets are uniform within ``magnitude * min(w, h)``."""
    if magnitude == 0:
        return Homography.identity()
    return random_homography(rng, w, h, magnitude)


def _foreground(rng, w, h, parallax):
    """Square occluder region and its extra shift in the target view."""
    side = 0.25 * min(w, h)
    x0 = rng.uniform(0.2 * w, 0.8 * w - side)
    y0 = rng.uniform(0.2 * h, 0.8 * h - side)
    ang = rng.uniform(0, 2 * np.pi)
    shift = parallax * np.array([np.cos(ang), np.sin(ang)]) if parallax > 0 else np.zeros(2)
    return (x0, y0, side), shift


def _scene(spec, xs, ys, fg, shift):
    bg = texture_rgb(spec.texture, xs, ys, spec.seed)
    if fg is None:
        return bg
    x0, y0, side = fg
    fx, fy = xs - shift[0], ys - shift[1]
    inside = (fx >= x0) & (fx < x0 + side) & (fy >= y0) & (fy < y0 + side)
    if not inside.any():
        return bg
    other = "blob-field" if spec.texture != "blob-field" else "perlin"
    bg[inside] = texture_rgb(other, fx[inside], fy[inside], spec.seed + 7919)
    return bg


def generate(spec: SceneSpec):
    """Render ``(i_ref, i_tgt, h_true)``; ``h_true`` maps reference to target pixels."""
    w, h = spec.dims
    rng = np.random.default_rng(spec.seed)
    h_true = planted_homography(rng, w, h, spec.h_magnitude)
    fg, shift = (None, None)
    if spec.parallax_px > 0:
        fg, shift = _foreground(rng, w, h, spec.parallax_px)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    i_ref = _scene(spec, xs, ys, fg, np.zeros(2))
    pts = invert(h_true).apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    i_tgt = _scene(spec, pts[:, 0].reshape(h, w), pts[:, 1].reshape(h, w), fg, shift)
    if spec.gamma != 1.0 or spec.brightness != 0.0:
        i_tgt = np.clip(i_tgt**spec.gamma + spec.brightness, 0.0, 1.0)
    if spec.noise_std > 0:
        i_tgt = np.clip(i_tgt + rng.normal(0.0, spec.noise_std, i_tgt.shape), 0.0, 1.0)
    return i_ref, i_tgt, h_true
