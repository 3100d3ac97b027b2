"""Stochastic Lagrangian Navier-Stokes laboratory on the periodic torus."""

import os

# the TBB layer shipped here is too old; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
