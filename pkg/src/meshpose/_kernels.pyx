# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels.

Screen convention: pixel (i, j) of the target grid samples the continuous
point (x=j, y=i).  Vertices arrive pre-projected to that grid; ``zc`` is the
camera-frame depth along the optical axis, and ``ax``/``ay`` are the per
column/row ray direction components used to convert interpolated axis depth
into Euclidean camera distance.

The pure-NumPy fallback in ``_raster_np`` implements the same arithmetic in
the same order so both backends produce bit-identical buffers.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor, sqrt

cnp.import_array()


cdef inline void _raster_core(
    const double[::1] xs, const double[::1] ys, const double[::1] zc,
    const int[:, ::1] faces,
    const double[::1] ax, const double[::1] ay,
    double[:, ::1] dist, int[:, ::1] tri, double[:, :, ::1] bary,
) noexcept nogil:
    cdef Py_ssize_t nf = faces.shape[0]
    cdef Py_ssize_t h = dist.shape[0]
    cdef Py_ssize_t w = dist.shape[1]
    cdef Py_ssize_t t, i, j, i0, i1, i2, jmin, jmax, imin, imax
    cdef double x0, y0, z0, x1, y1, z1, x2, y2, z2
    cdef double area2, minx, maxx, miny, maxy
    cdef double px, py, w0, w1, w2, l0, l1, l2, q0, q1, q2, qs
    cdef double zpix, scale, d
    cdef bint pos

    for t in range(nf):
        i0 = faces[t, 0]; i1 = faces[t, 1]; i2 = faces[t, 2]
        x0 = xs[i0]; y0 = ys[i0]; z0 = zc[i0]
        x1 = xs[i1]; y1 = ys[i1]; z1 = zc[i1]
        x2 = xs[i2]; y2 = ys[i2]; z2 = zc[i2]

        area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area2 == 0.0:
            continue
        pos = area2 > 0.0

        minx = x0; maxx = x0
        if x1 < minx: minx = x1
        if x1 > maxx: maxx = x1
        if x2 < minx: minx = x2
        if x2 > maxx: maxx = x2
        miny = y0; maxy = y0
        if y1 < miny: miny = y1
        if y1 > maxy: maxy = y1
        if y2 < miny: miny = y2
        if y2 > maxy: maxy = y2

        jmin = <Py_ssize_t>ceil(minx)
        jmax = <Py_ssize_t>floor(maxx)
        imin = <Py_ssize_t>ceil(miny)
        imax = <Py_ssize_t>floor(maxy)
        if jmin < 0: jmin = 0
        if imin < 0: imin = 0
        if jmax > w - 1: jmax = w - 1
        if imax > h - 1: imax = h - 1

        for i in range(imin, imax + 1):
            py = <double>i
            for j in range(jmin, jmax + 1):
                px = <double>j
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if pos:
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                else:
                    if w0 > 0.0 or w1 > 0.0 or w2 > 0.0:
                        continue
                l0 = w0 / area2; l1 = w1 / area2; l2 = w2 / area2
                q0 = l0 / z0; q1 = l1 / z1; q2 = l2 / z2
                qs = q0 + q1 + q2
                zpix = 1.0 / qs
                scale = sqrt(1.0 + ax[j] * ax[j] + ay[i] * ay[i])
                d = zpix * scale
                if d < dist[i, j]:
                    dist[i, j] = d
                    tri[i, j] = <int>t
                    bary[i, j, 0] = q0 / qs
                    bary[i, j, 1] = q1 / qs
                    bary[i, j, 2] = q2 / qs


def rasterize(xs, ys, zc, faces, ax, ay):
    """Z-buffer rasterization of projected triangles.

    Returns ``(dist, tri, bary)``: per-pixel Euclidean camera distance (+inf
    background), index of the frontmost triangle (-1 background) and its
    perspective-correct barycentric weights.  Depth ties keep the earlier
    triangle, so the output is deterministic for a fixed face order.
    """
    cdef Py_ssize_t h = ay.shape[0]
    cdef Py_ssize_t w = ax.shape[0]
    dist = np.full((h, w), np.inf, dtype=np.float64)
    tri = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    cdef double[:, ::1] dist_v = dist
    cdef int[:, ::1] tri_v = tri
    cdef double[:, :, ::1] bary_v = bary
    cdef const double[::1] xs_v = xs, ys_v = ys, zc_v = zc, ax_v = ax, ay_v = ay
    cdef const int[:, ::1] faces_v = faces
    with nogil:
        _raster_core(xs_v, ys_v, zc_v, faces_v, ax_v, ay_v, dist_v, tri_v, bary_v)
    return dist, tri, bary


def render_score(xs, ys, zc, faces, ax, ay, bank, ftest):
    """Rasterize a feature mesh and score it against an encoded map.

    ``bank`` is (K, d) float32 vertex features, ``ftest`` (h, w, d) float32
    with unit-norm pixels.  Returns ``(loss, n_foreground)`` where loss is
    one minus the mean cosine similarity over the rendered foreground.
    """
    cdef Py_ssize_t h = ay.shape[0]
    cdef Py_ssize_t w = ax.shape[0]
    dist = np.full((h, w), np.inf, dtype=np.float64)
    tri = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    cdef double[:, ::1] dist_v = dist
    cdef int[:, ::1] tri_v = tri
    cdef double[:, :, ::1] bary_v = bary
    cdef const double[::1] xs_v = xs, ys_v = ys, zc_v = zc, ax_v = ax, ay_v = ay
    cdef const int[:, ::1] faces_v = faces
    cdef const float[:, ::1] bank_v = bank
    cdef const float[:, :, ::1] ftest_v = ftest
    cdef Py_ssize_t d = bank.shape[1]
    cdef Py_ssize_t i, j, c, t, i0, i1, i2, cnt = 0
    cdef double b0, b1, b2, fc, dot, nrm, acc = 0.0

    with nogil:
        _raster_core(xs_v, ys_v, zc_v, faces_v, ax_v, ay_v, dist_v, tri_v, bary_v)
        for i in range(h):
            for j in range(w):
                t = tri_v[i, j]
                if t < 0:
                    continue
                i0 = faces_v[t, 0]; i1 = faces_v[t, 1]; i2 = faces_v[t, 2]
                b0 = bary_v[i, j, 0]; b1 = bary_v[i, j, 1]; b2 = bary_v[i, j, 2]
                dot = 0.0
                nrm = 0.0
                for c in range(d):
                    fc = (b0 * <double>bank_v[i0, c]
                          + b1 * <double>bank_v[i1, c]
                          + b2 * <double>bank_v[i2, c])
                    dot += fc * <double>ftest_v[i, j, c]
                    nrm += fc * fc
                if nrm > 1e-24:
                    acc += dot / sqrt(nrm)
                cnt += 1
    if cnt == 0:
        return 1.0, 0
    return 1.0 - acc / <double>cnt, cnt
