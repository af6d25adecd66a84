"""Pure-NumPy fallback for the compiled rasterization kernels.

Same per-pixel arithmetic as ``_kernels.pyx``, vectorized per triangle over
its bounding box, so the returned buffers are bit-identical to the compiled
path.  Scalar reductions in :func:`render_score` may differ from the
compiled kernel in the last bits because NumPy uses pairwise summation.
"""

from __future__ import annotations

import math

import numpy as np


def rasterize(xs, ys, zc, faces, ax, ay):
    """See ``_kernels.rasterize``."""
    h, w = ay.shape[0], ax.shape[0]
    dist = np.full((h, w), np.inf, dtype=np.float64)
    tri = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float64)

    for t in range(faces.shape[0]):
        i0, i1, i2 = faces[t]
        x0, y0, z0 = xs[i0], ys[i0], zc[i0]
        x1, y1, z1 = xs[i1], ys[i1], zc[i1]
        x2, y2, z2 = xs[i2], ys[i2], zc[i2]

        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue

        jmin = max(0, int(math.ceil(min(x0, x1, x2))))
        jmax = min(w - 1, int(math.floor(max(x0, x1, x2))))
        imin = max(0, int(math.ceil(min(y0, y1, y2))))
        imax = min(h - 1, int(math.floor(max(y0, y1, y2))))
        if jmin > jmax or imin > imax:
            continue

        px = np.arange(jmin, jmax + 1, dtype=np.float64)[None, :]
        py = np.arange(imin, imax + 1, dtype=np.float64)[:, None]
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if area2 > 0.0:
            inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        else:
            inside = (w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0)
        if not inside.any():
            continue

        q0 = (w0 / area2) / z0
        q1 = (w1 / area2) / z1
        q2 = (w2 / area2) / z2
        qs = q0 + q1 + q2
        zpix = 1.0 / qs
        scale = np.sqrt(1.0 + ax[None, jmin:jmax + 1] ** 2 + ay[imin:imax + 1, None] ** 2)
        d = zpix * scale

        box = (slice(imin, imax + 1), slice(jmin, jmax + 1))
        upd = inside & (d < dist[box])
        if not upd.any():
            continue
        dist[box][upd] = d[upd]
        tri[box][upd] = t
        sub = bary[box]
        sub[upd, 0] = (q0 / qs)[upd]
        sub[upd, 1] = (q1 / qs)[upd]
        sub[upd, 2] = (q2 / qs)[upd]

    return dist, tri, bary


def render_score(xs, ys, zc, faces, ax, ay, bank, ftest):
    """See ``_kernels.render_score``."""
    dist, tri, bary = rasterize(xs, ys, zc, faces, ax, ay)
    fg = tri >= 0
    cnt = int(fg.sum())
    if cnt == 0:
        return 1.0, 0
    idx = faces[tri[fg]]
    b = bary[fg]
    bank64 = bank.astype(np.float64)
    feat = (b[:, 0, None] * bank64[idx[:, 0]]
            + b[:, 1, None] * bank64[idx[:, 1]]
            + b[:, 2, None] * bank64[idx[:, 2]])
    dot = np.einsum("pc,pc->p", feat, ftest[fg].astype(np.float64))
    nrm = np.einsum("pc,pc->p", feat, feat)
    cos = np.where(nrm > 1e-24, dot / np.sqrt(np.maximum(nrm, 1e-300)), 0.0)
    return 1.0 - float(cos.sum()) / cnt, cnt
