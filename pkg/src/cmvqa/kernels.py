"""Backend selection for the fused cell kernels.

The compiled ``_kernels`` extension is used when importable; otherwise,
or when ``CMVQA_PURE_PYTHON=1`` is set, the numpy module ``_kernels_py``
is used. Both expose identical functions.
"""

import contextlib
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

if os.environ.get("CMVQA_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
    current = _kernels_py
else:
    current = _compiled


def available():
    return sorted(_BACKENDS)


def get(name=None):
    if name is None:
        return current
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}") from None


def set_backend(name):
    global current
    current = get(name)
    return current


@contextlib.contextmanager
def using(name):
    """Temporarily switch backend (tests, benchmarks)."""
    global current
    prev = current
    current = get(name)
    try:
        yield current
    finally:
        current = prev
