"""Kernel backend selection.

The compiled ``_core`` extension is used when importable; set
``TOOLPOSE3D_PURE_PYTHON=1`` to force the numpy fallback. Both backends
expose ``solve_dlt``, ``null_vector``, ``reprojection_errors`` and
``tip_labeling_scores`` with identical signatures.
"""
import os

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

BACKENDS = {"numpy": _fallback}
if _core is not None:
    BACKENDS["cython"] = _core

if os.environ.get("TOOLPOSE3D_PURE_PYTHON", "") not in ("", "0") or _core is None:
    backend = _fallback
else:
    backend = _core

BACKEND = backend.NAME


def get_backend(name: str):
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
