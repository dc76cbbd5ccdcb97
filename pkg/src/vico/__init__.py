"""Personalized mini latent-diffusion with visual-condition attention.

Importing this package before numpy honors the VICO_THREADS env var by
capping the BLAS thread pools, which is what makes VICO_THREADS=1 imply
deterministic mode end to end.
"""

import os as _os
import sys as _sys

_threads = _os.environ.get("VICO_THREADS", "").strip()
if _threads and "numpy" not in _sys.modules:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
