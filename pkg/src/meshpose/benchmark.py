"""Compiled-vs-fallback rasterizer benchmark: ``python -m meshpose.benchmark``.

Times the z-buffer rasterizer and the fused render-and-compare kernel on a
representative desk-scale workload through both implementations, checks the
outputs agree, and prints a table.  The numpy fallback is the reference;
the Cython extension is the default backend when importable.
"""

from __future__ import annotations

import time

import numpy as np

from . import _raster_np
from .backend import COMPILED
from .icosphere import build_geodesic_polyhedron
from .neural_mesh import init_neural_mesh
from .raster import Camera, _grid_rays, _screen_vertices
from .so3 import ViewSpec, lookat

try:
    from . import _kernels
except ImportError:
    _kernels = None


def _workload(level: int, stride: int, d: int):
    cam = Camera(distance=12.0, focal=2600.0, image_w=512, image_h=512,
                 stride=stride)
    mesh = build_geodesic_polyhedron(level)
    net = init_neural_mesh(mesh, d=d, seed=0, instance_id="bench")
    pose = lookat(ViewSpec(30.0, -20.0, 10.0))
    xs, ys, zc = _screen_vertices(mesh, pose, cam, stride)
    ax, ay = _grid_rays(cam, stride)
    rng = np.random.default_rng(0)
    ftest = rng.standard_normal((len(ay), len(ax), d)).astype(np.float32)
    ftest /= np.linalg.norm(ftest, axis=2, keepdims=True)
    return mesh, net, (xs, ys, zc, ax, ay), np.ascontiguousarray(ftest)


def _time(fn, reps: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def run(reps: int = 20) -> list[dict]:
    rows = []
    cases = [("rasterize 512/s1 level2", 2, 1, 8, "rasterize"),
             ("rasterize 512/s8 level2", 2, 8, 8, "rasterize"),
             ("render_score 64x64 d=64", 2, 8, 64, "score")]
    for name, level, stride, d, kind in cases:
        mesh, net, (xs, ys, zc, ax, ay), ftest = _workload(level, stride, d)
        n_reps = max(1, reps // (4 if stride == 1 else 1))

        if kind == "rasterize":
            def np_call():
                return _raster_np.rasterize(xs, ys, zc, mesh.faces, ax, ay)
        else:
            def np_call():
                return _raster_np.render_score(xs, ys, zc, mesh.faces, ax, ay,
                                               net.features, ftest)
        t_np = _time(np_call, n_reps)
        ref = np_call()

        t_cy = None
        agree = None
        if _kernels is not None:
            if kind == "rasterize":
                def cy_call():
                    return _kernels.rasterize(xs, ys, zc, mesh.faces, ax, ay)
            else:
                def cy_call():
                    return _kernels.render_score(xs, ys, zc, mesh.faces, ax, ay,
                                                 net.features, ftest)
            t_cy = _time(cy_call, n_reps)
            got = cy_call()
            if kind == "rasterize":
                agree = all(np.array_equal(a, b) for a, b in zip(ref, got))
            else:
                # the scalar loss reduction may differ in the last bits only
                agree = (abs(ref[0] - got[0]) < 1e-12) and ref[1] == got[1]
        rows.append({"case": name, "numpy_ms": t_np * 1e3,
                     "cython_ms": None if t_cy is None else t_cy * 1e3,
                     "agree": agree})
    return rows


def main() -> int:
    print(f"active backend: {'cython' if COMPILED else 'numpy fallback'}")
    print(f"{'case':<26} {'numpy':>10} {'cython':>10} {'speedup':>8}  agree")
    for row in run():
        nm_ms = f"{row['numpy_ms']:.2f}ms"
        if row["cython_ms"] is None:
            print(f"{row['case']:<26} {nm_ms:>10} {'n/a':>10} {'n/a':>8}  n/a")
        else:
            cy = f"{row['cython_ms']:.2f}ms"
            sp = f"{row['numpy_ms'] / row['cython_ms']:.1f}x"
            print(f"{row['case']:<26} {nm_ms:>10} {cy:>10} {sp:>8}  {row['agree']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
