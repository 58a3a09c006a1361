"""Backend selection for the verification kernels.

The compiled extension is used when it imports; otherwise the NumPy
fallback. Set ``TRDM_KERNELS=python`` to force the fallback.
"""
import os

from trdm import _kernels_py

BACKEND = "python"

if os.environ.get("TRDM_KERNELS", "").lower() != "python":
    try:
        from trdm import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

crps_pixels = _impl.crps_pixels
box_mean = _impl.box_mean
contingency = _impl.contingency

__all__ = ["BACKEND", "crps_pixels", "box_mean", "contingency"]
