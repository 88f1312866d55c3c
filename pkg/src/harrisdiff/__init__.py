"""Score-based diffusion sampling with analytic scores and explicit Harris constants."""

from harrisdiff.schedule import (
    Schedule,
    LinearBeta,
    KarrasVE,
    ForwardMoments,
    Grid,
    make_grid,
)
from harrisdiff.target import GaussianTarget, GmmTarget, build_benchmark_gmm

__version__ = "0.1.0"

__all__ = [
    "Schedule",
    "LinearBeta",
    "KarrasVE",
    "ForwardMoments",
    "Grid",
    "make_grid",
    "GaussianTarget",
    "GmmTarget",
    "build_benchmark_gmm",
    "__version__",
]
