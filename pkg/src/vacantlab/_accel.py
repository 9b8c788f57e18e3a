"""Numba shim.

Hot kernels are written once as scalar loops over numpy arrays and decorated
with :func:`njit`.  Setting ``VACANTLAB_DISABLE_NUMBA=1`` (or running without
numba installed) turns the decorators into no-ops, so the same kernels run as
plain Python/numpy.  Results are identical up to libm rounding; the fallback
is much slower and exists for debugging and for the benchmark.
"""
import hashlib
import os
from pathlib import Path

_FLAG = os.environ.get("VACANTLAB_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba as _nb
except ImportError:
    _nb = None

USE_NUMBA = _nb is not None


def _purge_stale_cache():
    # numba keys a cached kernel on its own file only, so a kernel whose
    # callee lives in another module survives edits to that callee; drop
    # every cached kernel whenever any package source changes
    here = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for f in sorted(here.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    cache = here / "__pycache__"
    stamp = cache / "numba-sources.sha1"
    try:
        if stamp.is_file() and stamp.read_text() == h.hexdigest():
            return
        for f in list(cache.glob("*.nbi")) + list(cache.glob("*.nbc")):
            f.unlink(missing_ok=True)
        cache.mkdir(exist_ok=True)
        stamp.write_text(h.hexdigest())
    except OSError:
        pass


if USE_NUMBA:
    _purge_stale_cache()

    def njit(func=None, **kwargs):
        kwargs.setdefault("cache", True)
        if func is None:
            return _nb.njit(**kwargs)
        return _nb.njit(**kwargs)(func)

    prange = _nb.prange

else:

    def njit(func=None, **kwargs):
        if func is not None:
            return func
        return lambda f: f

    prange = range


def backend():
    return "numba" if USE_NUMBA else "python"
