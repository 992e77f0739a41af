"""Desk-scale sparse-upcycled mixture-of-experts dual-encoder toolkit."""

import os as _os

# The workloads here are many small GEMMs; threaded BLAS loses to its own
# sync overhead. MUCP_THREADS caps every worker pool, BLAS included, and an
# explicitly exported BLAS variable still wins. Must run before numpy loads.
_cap = _os.environ.get("MUCP_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _cap)

__version__ = "0.1.0"
