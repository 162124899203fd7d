"""Multiline TRL calibration with first-order uncertainty propagation and a Monte-Carlo cross-check."""

from . import cpw, gum, kernels, mc, mismatch, mtrl, network, numkit
from ._jit import backend
from .mtrl import CalibrationSolution, LineSet, MultilineTRL
from .network import TwoPortRecord, read_touchstone, write_touchstone

__version__ = "0.1.0"

__all__ = ["cpw", "gum", "kernels", "mc", "mismatch", "mtrl", "network", "numkit", "backend",
           "CalibrationSolution", "LineSet", "MultilineTRL", "TwoPortRecord", "read_touchstone",
           "write_touchstone", "__version__"]
