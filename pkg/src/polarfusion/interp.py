"""Spline sampling of a single 2-D channel at fractional (row, col) positions."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def spline_sample(channel, points, order: int = 3, fill: float = 0.0) -> np.ndarray:
    """Sample ``channel`` at ``points``.

    ``points`` is either an (N, 2) array of (row, col) or a pair of equally
    shaped coordinate arrays ``(rows, cols)``; the result has the shape of one
    coordinate array. Order 1 is bilinear, order 3 a cubic B-spline with
    mirror-boundary prefiltering (grid nodes are reproduced exactly). Points outside the
    image take ``fill``.
    """
    if order not in (1, 3):
        raise ValueError(f"spline order must be 1 or 3, got {order}")
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ValueError("spline_sample works on one 2-D channel")
    if isinstance(points, tuple):
        rows, cols = (np.asarray(p, dtype=np.float64) for p in points)
    else:
        pts = np.asarray(points, dtype=np.float64)
        rows, cols = pts[..., 0], pts[..., 1]
    coords = np.stack([rows.ravel(), cols.ravel()])
    vals = ndimage.map_coordinates(channel, coords, order=order, mode="mirror", prefilter=True)
    h, w = channel.shape
    outside = (coords[0] < 0) | (coords[0] > h - 1) | (coords[1] < 0) | (coords[1] > w - 1)
    vals[outside] = fill
    return vals.reshape(rows.shape)
