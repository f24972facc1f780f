"""Rotation-invariant, chirality-sensitive shape matching with 3D Zernike spectra.

Submodules load on first attribute access so that importing the package (for
example from the command line) does not pull in numpy before thread limits
are set.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("alignment", "cli", "diagnostics", "geometry", "io", "loss", "metrics", "optimize", "rotation",
               "zernike")

_EXPORTS = {
    "PointCloud": "geometry",
    "normalize_to_unit_ball": "geometry",
    "ZernikeBasis": "zernike",
    "MomentTensor": "zernike",
    "build_basis": "zernike",
    "project_moments": "zernike",
    "wigner_d_quat": "rotation",
    "wigner_d_euler": "rotation",
    "align": "alignment",
    "align_multistart": "alignment",
    "AlignmentConfig": "alignment",
    "LossConfig": "loss",
    "SpectralLoss": "loss",
    "total_gradient": "loss",
    "direct_optimize": "optimize",
    "OptimizeConfig": "optimize",
    "invariance_report": "metrics",
    "load_cloud": "io",
    "save_cloud": "io",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
