# Numba shim. CAUSALRFF_NUMBA=0 forces the pure-numpy kernels even when numba
# is importable; any other value (or unset) uses numba when available.
import os
from warnings import warn

try:
    import numba as _nb
except ImportError:  # pragma: no cover
    _nb = None

_flag = os.environ.get("CAUSALRFF_NUMBA", "1").strip().lower()
ENABLED = _nb is not None and _flag not in ("0", "false", "no", "off")

if _nb is None and _flag not in ("0", "false", "no", "off"):  # pragma: no cover
    warn("numba not found, falling back to numpy kernels")


def njit(*args, **kwargs):
    """`numba.njit` when numba is importable, otherwise an identity decorator.

    Compilation is lazy, so decorating a function costs nothing when the numpy
    path is selected.
    """
    if _nb is None:  # pragma: no cover
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _nb.njit(*args, **kwargs)


def backend():
    return "numba" if ENABLED else "numpy"
