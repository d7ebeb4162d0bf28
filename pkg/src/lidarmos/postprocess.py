"""Range-image kNN label refinement (the post-processing baseline)."""
from __future__ import annotations

import numpy as np

from .lidar_io import MosLabel
from .projection import RangeImage


def knn_refine(points, pixel_labels: np.ndarray, image: RangeImage, k: int = 5, window: int = 5,
               sigma: float = 1.0, cutoff: float = 1.0) -> np.ndarray:
    """Re-label every point by a range-aware vote over its projection window.

    For each point, pixels in the ``window x window`` neighborhood of its own
    pixel are ranked by ``|range_pixel - range_point|``; the ``k`` closest
    with a difference within ``cutoff`` vote, each weighted by
    ``exp(-d^2 / 2 sigma^2)``. Points with no qualifying neighbor keep their
    pixel's label; points outside the image are labeled static.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd number")
    if not 1 <= k <= window * window:
        raise ValueError(f"k must lie in [1, {window * window}]")
    pts = getattr(points, "points", points)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    h, w = image.shape
    labels = np.asarray(pixel_labels)
    out = np.full(len(pts), int(MosLabel.STATIC), dtype=np.int64)
    inview = np.flatnonzero(image.proj_v >= 0)
    if len(inview) == 0:
        return out
    v, u = image.proj_v[inview], image.proj_u[inview]
    r = np.linalg.norm(pts[inview], axis=1)
    own = labels[v, u]

    half = window // 2
    offsets = [(dv, du) for dv in range(-half, half + 1) for du in range(-half, half + 1)]
    # centre first so it wins ties in the stable sort below
    offsets.remove((0, 0))
    offsets.insert(0, (0, 0))
    dv = np.array([o[0] for o in offsets])
    du = np.array([o[1] for o in offsets])
    nv = v[:, None] + dv[None]
    nu = (u[:, None] + du[None]) % w
    inside = (nv >= 0) & (nv < h)
    nv_c = np.clip(nv, 0, h - 1)
    nr = image.range[nv_c, nu]
    nl = labels[nv_c, nu]
    diff = np.where(inside & (nr > 0), np.abs(nr - r[:, None]), np.inf)

    order = np.argsort(diff, axis=1, kind="stable")[:, :k]
    d_k = np.take_along_axis(diff, order, axis=1)
    l_k = np.take_along_axis(nl, order, axis=1)
    ok = d_k <= cutoff
    wgt = np.where(ok, np.exp(-0.5 * (d_k / sigma) ** 2), 0.0)

    n_labels = int(max(labels.max(initial=0), own.max(initial=0))) + 1
    votes = np.zeros((len(inview), n_labels))
    for lab in range(n_labels):
        votes[:, lab] = np.sum(wgt * (l_k == lab), axis=1)
    best = votes.max(axis=1)
    # prefer the point's own pixel label on ties
    refined = np.where(votes[np.arange(len(own)), own] >= best, own, votes.argmax(axis=1))
    refined = np.where(ok.any(axis=1), refined, own)
    out[inview] = refined
    return out
