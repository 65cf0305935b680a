"""Desk-scale dynamic Gaussian splatting with anchor deformation and
deformation-aware densification."""

import os

# the TBB layer shipped in this environment is too old for numba
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
