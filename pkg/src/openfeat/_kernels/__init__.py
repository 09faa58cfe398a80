"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``OPENFEAT_BACKEND=numpy``
to force the fallback (``OPENFEAT_BACKEND=cython`` makes a missing extension an
error instead of a silent fallback).
"""
import os

from . import _fallback

_requested = os.environ.get("OPENFEAT_BACKEND", "").strip().lower()

if _requested == "numpy":
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _fallback

_EXPORTS = ("BACKEND", "attn_forward", "attn_backward", "proto_logprobs", "proto_head",
            "xoshiro_uniform")


def _install(impl):
    g = globals()
    for name in _EXPORTS:
        g[name] = getattr(impl, name)


_install(_impl)


def get_backend(name):
    """Return the kernel module for ``"numpy"`` or ``"cython"``."""
    if name == "numpy":
        return _fallback
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")


def use_backend(name):
    """Switch the active kernels at runtime; returns the previous backend name."""
    prev = BACKEND
    _install(get_backend(name))
    return prev
