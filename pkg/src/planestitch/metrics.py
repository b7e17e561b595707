"""Masked PSNR/SSIM over the overlap of two warped views, and difficulty buckets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .distortion import to_luma
from .errors import CanvasMismatch, EmptyOverlap
from .warp import WarpedImage

PSNR_CAP = 100.0
SSIM_WINDOW = 7
C1 = 0.01**2
C2 = 0.03**2
BUCKETS = ("Easy", "Moderate", "Hard")


@dataclass
class MetricReport:
    mpsnr: float
    mssim: float
    overlap_fraction: float
    bucket: str = "Unbucketed"
    name: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "mpsnr": float(self.mpsnr), "mssim": float(self.mssim),
                "overlap_fraction": float(self.overlap_fraction), "bucket": self.bucket}


def overlap_mask(a: WarpedImage, b: WarpedImage) -> np.ndarray:
    if a.mask.shape != b.mask.shape:
        raise CanvasMismatch(f"masks differ: {a.mask.shape} vs {b.mask.shape}")
    return ((a.mask > 0) & (b.mask > 0)).astype(float)


def _luma_pair(a, b):
    if a.pixels.shape != b.pixels.shape:
        raise CanvasMismatch(f"canvases differ: {a.pixels.shape} vs {b.pixels.shape}")
    return to_luma(a.pixels), to_luma(b.pixels), overlap_mask(a, b) > 0


def mpsnr(a: WarpedImage, b: WarpedImage) -> float:
    """PSNR of the luma difference over overlap pixels, capped at 100 dB."""
    la, lb, m = _luma_pair(a, b)
    if not m.any():
        raise EmptyOverlap("no overlapping pixels")
    rmse = math.sqrt(float(np.mean((la[m] - lb[m]) ** 2)))
    if rmse < 1e-5:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(1.0 / rmse))


def _window_mean(x, size, gaussian):
    if gaussian:
        # sigma 1.5 with radius 3 gives the same 7-pixel footprint
        return ndimage.gaussian_filter(x, 1.5, mode="constant", truncate=(size // 2) / 1.5)
    return ndimage.uniform_filter(x, size, mode="constant")


def ssim_map(x, y, size: int = SSIM_WINDOW, gaussian: bool = False) -> np.ndarray:
    """Per-pixel SSIM on [0, 1] data; values near the border use zero padding."""
    mx = _window_mean(x, size, gaussian)
    my = _window_mean(y, size, gaussian)
    vx = _window_mean(x * x, size, gaussian) - mx * mx
    vy = _window_mean(y * y, size, gaussian) - my * my
    cov = _window_mean(x * y, size, gaussian) - mx * my
    return ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def valid_windows(mask, size: int = SSIM_WINDOW) -> np.ndarray:
    """Pixels whose whole ``size x size`` window lies inside ``mask`` and the raster."""
    return ndimage.binary_erosion(mask.astype(bool), structure=np.ones((size, size), bool), border_value=0)


def mssim(a: WarpedImage, b: WarpedImage, gaussian: bool = False) -> float:
    """Mean SSIM over pixels whose 7x7 window sits fully inside the overlap."""
    la, lb, m = _luma_pair(a, b)
    keep = valid_windows(m)
    if not keep.any():
        raise EmptyOverlap("overlap holds no complete SSIM window")
    return float(np.clip(np.mean(ssim_map(la, lb, gaussian=gaussian)[keep]), -1.0, 1.0))


def evaluate_pair(a: WarpedImage, b: WarpedImage, name: str = "", gaussian: bool = False) -> MetricReport:
    m = overlap_mask(a, b)
    return MetricReport(mpsnr(a, b), mssim(a, b, gaussian), float(m.mean()), name=name)


def parse_bucket_mode(mode: str):
    """``"tertile"`` or ``"fixed:t1,t2"`` (dB, t1 > t2) to a normalized tuple."""
    if mode == "tertile":
        return ("tertile",)
    if mode.startswith("fixed:"):
        try:
            t1, t2 = (float(v) for v in mode[6:].split(","))
        except ValueError:
            raise ValueError(f"bad bucket mode {mode!r}; expected fixed:t1,t2") from None
        if t1 < t2:
            raise ValueError("fixed bucket thresholds need t1 >= t2")
        return ("fixed", t1, t2)
    raise ValueError(f"unknown bucket mode {mode!r}")


def bucket(reports, mode="tertile"):
    """Assign Easy/Moderate/Hard in place and return the reports.

    Tertile sizes follow ``np.array_split``; the sort is stable so equal
    scores keep input order.
    """
    spec = parse_bucket_mode(mode) if isinstance(mode, str) else tuple(mode)
    reports = list(reports)
    if spec[0] == "tertile":
        order = sorted(range(len(reports)), key=lambda i: -reports[i].mpsnr)
        for label, idx in zip(BUCKETS, np.array_split(np.array(order, dtype=int), 3)):
            for i in idx:
                reports[i].bucket = label
    else:
        _, t1, t2 = spec
        for r in reports:
            r.bucket = "Easy" if r.mpsnr >= t1 else "Moderate" if r.mpsnr >= t2 else "Hard"
    return reports


def summary_rows(reports):
    """(label, count, mean mPSNR, mean mSSIM) per bucket plus the Average row."""
    rows = []
    for label in BUCKETS + ("Average",):
        sel = [r for r in reports if label == "Average" or r.bucket == label]
        if sel:
            rows.append((label, len(sel), float(np.mean([r.mpsnr for r in sel])),
                         float(np.mean([r.mssim for r in sel]))))
        else:
            rows.append((label, 0, float("nan"), float("nan")))
    return rows


def format_table(reports, mode="tertile") -> str:
    header = f"# buckets: {mode}"
    lines = [header, f"{'':<10}{'Easy':>16}{'Moderate':>16}{'Hard':>16}{'Average':>16}"]
    rows = summary_rows(reports)
    lines.append(f"{'mPSNR':<10}" + "".join(f"{r[2]:>16.3f}" for r in rows))
    lines.append(f"{'mSSIM':<10}" + "".join(f"{r[3]:>16.4f}" for r in rows))
    lines.append(f"{'pairs':<10}" + "".join(f"{r[1]:>16d}" for r in rows))
    return "\n".join(lines)
