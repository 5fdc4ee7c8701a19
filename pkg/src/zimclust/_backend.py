"""Pick the compiled kernels when available, NumPy otherwise.

``ZIMCLUST_BACKEND=python`` forces the NumPy implementation.
"""
import os

from . import _pykernels

python_kernels = _pykernels

try:
    from . import _ckernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("ZIMCLUST_BACKEND", "").lower() != "python":
    kernels = compiled_kernels
    BACKEND = "compiled"
else:
    kernels = _pykernels
    BACKEND = "python"
