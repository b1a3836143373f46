"""Forward-kernel backend selection.

The compiled kernel is used when the extension module was built; otherwise
the numpy implementation is used.  ``SMAS_BACKEND=python`` forces the
fallback.
"""
import os

from . import _forward_py

_BACKENDS = {"python": _forward_py.forward_loglik}

try:
    from . import _forward_cy
except ImportError:  # extension not built
    _forward_cy = None
else:
    _BACKENDS["cython"] = _forward_cy.forward_loglik

if os.environ.get("SMAS_BACKEND", "").lower() == "python" or _forward_cy is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def available():
    return sorted(_BACKENDS)


def forward_loglik(*args, backend=None):
    """Dispatch to ``backend`` (default: the selected one); see ``_forward_py``."""
    name = backend or BACKEND
    try:
        fn = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available (have {available()})") from None
    return fn(*args)
