"""Binary-mask geometry: IoU, tightest boxes, point sampling."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, InputError


def iou(a, b):
    """|a & b| / |a | b|; 1.0 when both masks are empty, 0.0 when exactly one is."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"iou of masks with shapes {a.shape} and {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def tightest_box(mask):
    """Inclusive ``(r0, c0, r1, c1)`` bounds of the foreground."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise InputError("tightest_box of an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def box_to_mask(box, shape):
    r0, c0, r1, c1 = box
    out = np.zeros(shape, dtype=bool)
    out[r0:r1 + 1, c0:c1 + 1] = True
    return out


def sample_points_in_mask(mask, k, rng, replace=True):
    """``k`` uniform foreground pixels as ``(row, col)`` pairs.

    Draws are independent (with replacement) unless ``replace=False``.
    """
    if k < 1:
        raise InputError("need k >= 1 points")
    rr, cc = np.nonzero(np.asarray(mask, dtype=bool))
    if rr.size == 0:
        raise InputError("cannot sample points from an empty mask")
    if not replace and k > rr.size:
        raise InputError(f"cannot draw {k} distinct points from {rr.size} pixels")
    pick = rng.choice(rr.size, size=k, replace=replace)
    return [(int(rr[i]), int(cc[i])) for i in pick]
