"""Hot loops, compiled when possible.

The Cython extension ``_ckernels`` is used when it was built and
``SLEEPMODEL_PURE_PYTHON`` is not set; otherwise the numpy / pure-Python
versions in ``_pykernels`` are used. Both give identical results.
"""

import os

from . import _pykernels

if os.environ.get("SLEEPMODEL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

sample_chain = _impl.sample_chain
beam_search_dense = _impl.beam_search_dense
# already vectorized; a compiled loop was slower
encode_contexts = _pykernels.encode_contexts
select_top = _pykernels.select_top


def implementations():
    """All importable backends by name, for tests and benchmarks."""
    impls = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        impls["cython"] = _ckernels
    return impls
