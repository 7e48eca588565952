"""Backend selection for the hot elliptic-beam kernel.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Setting ``FSCVQKD_PURE_PYTHON=1`` forces numpy.
"""
import os

from . import _beam

BACKEND = "numpy"
aperture_transmissivity = _beam.aperture_transmissivity

if os.environ.get("FSCVQKD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _beam_ext
    except ImportError:
        pass
    else:
        aperture_transmissivity = _beam_ext.aperture_transmissivity
        BACKEND = "cython"

__all__ = ["BACKEND", "aperture_transmissivity"]
