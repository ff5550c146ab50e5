"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when the
``CASCADETRACK_PURE_PYTHON`` environment variable is set to a non-empty value
other than ``0``, the numpy implementation takes over.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py


def _load_compiled() -> ModuleType | None:
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_force_py = os.environ.get("CASCADETRACK_PURE_PYTHON", "") not in ("", "0")
_impl: ModuleType = _kernels_py if (_force_py or _compiled is None) else _compiled

BACKEND: str = _impl.NAME


def available_backends() -> dict[str, ModuleType]:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def get_backend(name: str) -> ModuleType:
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


def roialign(data, rois, out_size, spb):
    return _impl.roialign(data, rois, out_size, spb)


def nms(xyxy, order, iou_thr, keep):
    return _impl.nms(xyxy, order, iou_thr, keep)


def ncc(template, search):
    return _impl.ncc(template, search)


def sample_grid(img, ys, xs, pad):
    return _impl.sample_grid(img, ys, xs, pad)
