"""Hot matching-stage kernels with two interchangeable backends.

The compiled extension (``confmatch.kernels._native``, built from Cython)
is preferred when it imported successfully; otherwise the pure-numpy
implementation in :mod:`confmatch.kernels.pykernels` is used.  Set the
environment variable ``CONFMATCH_BACKEND`` to ``native`` or ``python``
before import to force a choice.  ``confmatch kernel-bench`` times the
two backends against each other and checks that they agree.
"""

import os

from . import pykernels

_BACKENDS = {"python": pykernels}

try:
    from . import _native  # type: ignore[attr-defined]

    _BACKENDS["native"] = _native
except ImportError:
    _native = None

_forced = os.environ.get("CONFMATCH_BACKEND")
if _forced:
    if _forced not in _BACKENDS:
        raise ImportError(
            f"CONFMATCH_BACKEND={_forced!r} requested but only "
            f"{sorted(_BACKENDS)} are available"
        )
    _active = _forced
else:
    _active = "native" if "native" in _BACKENDS else "python"


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return _active


def get_backend(name=None):
    """Return the backend module for `name` (default: the active one)."""
    return _BACKENDS[name or _active]


def dual_softmax(s):
    return _BACKENDS[_active].dual_softmax(s)


def batched_dual_softmax(s):
    return _BACKENDS[_active].batched_dual_softmax(s)


def mutual_pairs(p, threshold):
    return _BACKENDS[_active].mutual_pairs(p, threshold)


def batched_mutual_pairs(p, threshold):
    return _BACKENDS[_active].batched_mutual_pairs(p, threshold)


def softmax_expectation(scores, offsets, valid):
    return _BACKENDS[_active].softmax_expectation(scores, offsets, valid)
