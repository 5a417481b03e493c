"""Meshless XPBD engine for continuum inelasticity.

Velocity-parameterized XPBD with kernel-corrected velocity gradients,
updated-Lagrangian deformation gradients and in-loop return mapping.
"""
import os
import sys
import warnings

# numba fixes its pool size on first import; leave room for --threads
# above the core count unless the caller already imported numba.
if "numba" not in sys.modules:
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 4)))

# numba probes TBB at import and warns when the system copy is too old;
# it falls back to another threading layer on its own.
warnings.filterwarnings("ignore", message=".*TBB.*")

__version__ = "0.1.0"
