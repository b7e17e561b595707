"""Two-view image stitching that warps both views onto an optimized intermediate plane."""
from .correlation import estimate_homography_dual
from .homography import DecompositionCoefficients, Homography, compose, decompose, invert
from .plane_optimizer import OptimizerConfig, optimize_coefficients
from .warp import bidirectional_stitch, composite_average

__version__ = "0.1.0"

__all__ = [
    "DecompositionCoefficients",
    "Homography",
    "OptimizerConfig",
    "bidirectional_stitch",
    "compose",
    "composite_average",
    "decompose",
    "estimate_homography_dual",
    "invert",
    "optimize_coefficients",
]
