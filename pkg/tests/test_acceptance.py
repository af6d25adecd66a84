"""End-to-end acceptance gates.

Each test exercises one numbered criterion, records a PASS/FAIL verdict for
the summary table printed after the run, and asserts it.  The later criteria
train real (scaled-down) models and dominate the suite's runtime; run this
file alone to check only the gates.
"""

import time

import numpy as np
import pytest

from meshpose import neural_mesh as nm
from meshpose.encoder import (EncoderParams, encode, encode_backward,
                              encode_full, init_encoder)
from meshpose.icosphere import build_geodesic_polyhedron
from meshpose.inference import align_predictions, compute_metrics, estimate_pose
from meshpose.neural_mesh import _bg_loss_core, _fg_loss_core
from meshpose.raster import Camera, compute_visibility, project_vertices, \
    render_depth
from meshpose.so3 import (Rotation, ViewSpec, compose_pose, geodesic_distance,
                          lookat)
from meshpose.viewgen import (NoiseConfig, _render_view, build_instance,
                              generate_image_set, view_grid)

from conftest import record_criterion, random_rotation
from oracles import (directional_diff, logm_angle_between, quat_angle_between,
                     quat_from_axis_angle, quat_multiply, quat_to_matrix,
                     visible_by_raycast)


def check(number: int, passed: bool, detail: str) -> None:
    record_criterion(number, passed, detail)
    assert passed, f"criterion {number}: {detail}"


# --- criterion 1: geometry suite -------------------------------------------

def test_criterion_1_geometry(rng):
    t0 = time.time()
    ok = True

    # pure-azimuth lookat equals a y-rotation (quaternion oracle)
    for az in (0.0, 37.0, -120.0, 180.0):
        expect = quat_to_matrix(quat_from_axis_angle(
            np.array([0.0, 1.0, 0.0]), np.deg2rad(-az)))
        ok &= bool(np.max(np.abs(lookat(ViewSpec(az, 0.0, 0.0)).m - expect)) < 1e-12)
    a = lookat(ViewSpec(25.0, 40.0, 10.0))
    b = lookat(ViewSpec(-60.0, -15.0, 0.0))
    ok &= bool(np.max(np.abs(compose_pose(a, b).m - a.m @ b.m)) < 1e-15)
    # elevation-only lookats compose additively
    c = compose_pose(lookat(ViewSpec(0.0, 20.0, 0.0)), lookat(ViewSpec(0.0, 15.0, 0.0)))
    ok &= bool(np.max(np.abs(c.m - lookat(ViewSpec(0.0, 35.0, 0.0)).m)) < 1e-12)

    # geodesic distance against the matrix-log oracle on 1000 random pairs
    worst = 0.0
    for _ in range(1000):
        p = Rotation(random_rotation(rng))
        q = Rotation(random_rotation(rng))
        worst = max(worst, abs(geodesic_distance(p, q)
                               - logm_angle_between(p.m, q.m)))
    ok &= worst < 1e-6

    # and against the quaternion oracle on a composed pair of known angle
    qa = quat_from_axis_angle(np.array([1.0, 2.0, -0.5]), 1.1)
    qb = quat_multiply(quat_from_axis_angle(np.array([0.3, -1.0, 2.0]), 0.7), qa)
    ma, mb = quat_to_matrix(qa), quat_to_matrix(qb)
    got = geodesic_distance(Rotation(ma), Rotation(mb))
    ok &= bool(abs(got - quat_angle_between(ma, mb)) < 1e-9)
    ok &= bool(abs(got - 0.7) < 1e-9)

    dt = time.time() - t0
    ok &= dt < 5.0
    check(1, ok, f"logm |err|max={worst:.2e} (<1e-6), {dt:.2f}s (<5s)")


# --- criterion 2: visibility vs ray oracle ----------------------------------

def test_criterion_2_visibility(rng):
    t0 = time.time()
    mesh = build_geodesic_polyhedron(1)
    dist = 12.0
    # object fills ~85% of the frame; stride 1 so silhouette quantization
    # stays below tau_r
    focal = float(round(0.85 * 1024.0 / np.tan(np.arcsin(1.0 / dist))))
    cam = Camera(distance=dist, focal=focal, image_w=2048, image_h=2048, stride=1)
    tau_r = 0.05 * mesh.radius

    total = agree = 0
    borderline = True
    for _ in range(100):
        pose = Rotation(random_rotation(rng))
        screen = project_vertices(mesh, pose, cam)
        depth = render_depth(mesh, pose, cam)
        got = compute_visibility(screen, depth, tau_r).visible
        world = mesh.vertices @ pose.m.T
        expect = visible_by_raycast(world, mesh.faces,
                                    np.array([0.0, 0.0, -dist]))
        same = got == expect
        total += len(got)
        agree += int(np.count_nonzero(same))
        if not same.all():
            fg = depth[np.isfinite(depth)]
            for k in np.flatnonzero(~same):
                # disagreements are only legitimate for grazing vertices,
                # whose distance sits within tau_r of rendered silhouette
                # depth values
                gap = float(np.min(np.abs(fg - screen.dists[k])))
                borderline &= gap < tau_r

    frac = agree / total
    dt = time.time() - t0
    ok = frac >= 0.99 and borderline and dt < 30.0
    check(2, ok, f"agreement {frac:.4%} (>=99%), mismatches at silhouette: "
                 f"{borderline}, {dt:.1f}s (<30s)")


# --- criterion 3: gradient suites -------------------------------------------

def _rel_gap(loss_of, x, grad, rng, h=1e-6) -> float:
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    fd = (loss_of(x + h * v) - loss_of(x - h * v)) / (2 * h)
    analytic = float(np.sum(np.asarray(grad, dtype=np.float64) * v))
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)


def _encoder_case(rng) -> float:
    h, w = 8 * int(rng.integers(2, 5)), 8 * int(rng.integers(2, 5))
    d = int(rng.integers(4, 9))
    base = init_encoder(d=d, seed=int(rng.integers(1 << 30)))
    p64 = EncoderParams([wt.astype(np.float64) for wt in base.weights],
                        [bs.astype(np.float64) for bs in base.biases])
    img = rng.uniform(size=(h, w, 3))
    fmap, cache = encode_full(p64, img)
    gdir = rng.normal(size=fmap.shape)
    wg, bg = encode_backward(p64, cache, gdir)

    li = int(rng.integers(3))
    arr, grads = (p64.weights, wg) if rng.random() < 0.5 else (p64.biases, bg)
    v = rng.normal(size=arr[li].shape)
    v /= np.linalg.norm(v)

    def f(x, li=li, arr=arr):
        saved = arr[li]
        arr[li] = x
        out = float(np.sum(encode(p64, img).astype(np.float64) * gdir))
        arr[li] = saved
        return out

    analytic = float(np.sum(grads[li] * v))
    numeric = directional_diff(f, arr[li], v, h=1e-6)
    return abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-8)


def test_criterion_3_gradients(rng):
    worst_fg = worst_bg = worst_enc = 0.0
    for _ in range(20):
        n = int(rng.integers(3, 8))
        K = int(rng.integers(n + 2, n + 9))
        d = int(rng.integers(4, 9))
        kappa = float(rng.uniform(2.0, 16.0))
        theta = rng.standard_normal((K, d))
        theta /= np.linalg.norm(theta, axis=1, keepdims=True)
        theta = theta.astype(np.float32)
        bg_bank = rng.standard_normal((int(rng.integers(2, 6)), d))
        bg_bank /= np.linalg.norm(bg_bank, axis=1, keepdims=True)
        bg_bank = bg_bank.astype(np.float32)
        f_vis = rng.standard_normal((n, d))
        f_vis /= np.linalg.norm(f_vis, axis=1, keepdims=True)
        vis_idx = rng.choice(K, n, replace=False)
        allowed = np.ones((K, K), dtype=bool)
        for k in range(K):
            allowed[k, (k + 1) % K] = False

        g_fg = _fg_loss_core(f_vis, vis_idx, theta, bg_bank, kappa, allowed)[1]
        worst_fg = max(worst_fg, _rel_gap(
            lambda x: _fg_loss_core(x, vis_idx, theta, bg_bank, kappa, allowed)[0],
            f_vis, g_fg, rng))

        f_bg = rng.standard_normal((int(rng.integers(3, 9)), d))
        f_bg /= np.linalg.norm(f_bg, axis=1, keepdims=True)
        g_bg = _bg_loss_core(f_bg, bg_bank, theta, kappa)[1]
        worst_bg = max(worst_bg, _rel_gap(
            lambda x: _bg_loss_core(x, bg_bank, theta, kappa)[0],
            f_bg, g_bg, rng))

    for _ in range(20):
        worst_enc = max(worst_enc, _encoder_case(rng))

    ok = max(worst_fg, worst_bg, worst_enc) < 1e-4
    check(3, ok, f"rel err: encoder {worst_enc:.2e}, fg {worst_fg:.2e}, "
                 f"bg {worst_bg:.2e} (<1e-4)")


# --- criterion 4: momentum-update algebra ------------------------------------

def test_criterion_4_momentum():
    mesh = build_geodesic_polyhedron(0)
    net = nm.init_neural_mesh(mesh, d=4, seed=0, instance_id="x")
    K = len(mesh.vertices)
    feats = np.zeros((K, 4), dtype=np.float32)
    feats[:, 1] = 1.0
    vis = np.zeros(K, dtype=np.int8)

    # o = 0: row passes through untouched
    out = nm.momentum_update(net, feats, vis, beta=0.9)
    ok = bool(np.array_equal(out.features, net.features))

    # o = 1, beta = 0: replacement by the (unit) new feature
    vis[:] = 1
    out = nm.momentum_update(net, feats, vis, beta=0.0)
    ok &= bool(np.max(np.abs(out.features - feats)) < 1e-6)

    # o = 1, beta = 0.9, theta = e0, f = e1 -> normalize(0.9 e0 + 0.1 e1)
    e0 = np.zeros((K, 4), dtype=np.float32)
    e0[:, 0] = 1.0
    base = nm.NeuralMesh(mesh, e0, "x")
    out = nm.momentum_update(base, feats, vis, beta=0.9)
    expect = np.array([0.9, 0.1, 0.0, 0.0]) / np.sqrt(0.82)
    ok &= bool(np.max(np.abs(out.features - expect.astype(np.float32))) < 1e-6)
    check(4, ok, "all three update examples hold to normalization")


# --- criteria 5 + 8: single-instance pose accuracy ---------------------------
#
# One protocol shared by both criteria: one instance, the full 85-view set,
# level-2 geometry, d = 64, 30 epochs, then pose estimation on 10 novel
# (az, el) views that sit between grid points.  Criterion 8 repeats it with
# degraded generation (pose noise, artifacts); test renders stay clean so
# the comparison isolates training-data quality.

C5_CAM = Camera(distance=12.0, focal=2600.0, image_w=512, image_h=512, stride=8)
C5_SPECS = [(22.5, 7.5), (-37.5, -22.5), (52.5, 37.5), (-67.5, 7.5),
            (97.5, -7.5), (127.5, 22.5), (-142.5, -37.5), (172.5, 7.5),
            (-97.5, 37.5), (7.5, -7.5)]


def _single_instance_median(noise: NoiseConfig):
    """Returns (median error deg over the 10 unseen views, elapsed seconds)."""
    t0 = time.time()
    obj = build_instance(family_seed=0, index=0, level=2)
    imgset = generate_image_set(obj, view_grid(), noise, C5_CAM)
    assert len(imgset.views) == 85
    res = nm.train([imgset], nm.TrainConfig(d=64, level=2, epochs=30, seed=0))

    clean = NoiseConfig(seed=0)
    preds, gts = [], []
    for az, el in C5_SPECS:
        true = lookat(ViewSpec(az, el, 0.0))
        img, _ = _render_view(obj, true, C5_CAM, None, clean)
        fmap = encode(res.encoder, img.astype(np.float32) / 255.0)
        preds.append(estimate_pose(fmap, res.meshes[0], C5_CAM).pose)
        gts.append(true)
    rep = compute_metrics(preds, gts)
    return rep.median_deg, time.time() - t0


@pytest.fixture(scope="session")
def clean_single_instance():
    return _single_instance_median(NoiseConfig(seed=0))


def test_criterion_5_single_instance(clean_single_instance):
    median, dt = clean_single_instance
    ok = median < 10.0 and dt < 600.0
    check(5, ok, f"median {median:.2f} deg (<10), {dt:.0f}s (<600)")


def test_criterion_8_noise_robustness(clean_single_instance):
    clean_median, _ = clean_single_instance
    noisy_median, _ = _single_instance_median(NoiseConfig(pose_sigma=5.0, seed=0))
    art_median, _ = _single_instance_median(NoiseConfig(artifact_rate=0.3, seed=0))
    excess = noisy_median - clean_median
    ok = excess < 10.0 and art_median < 15.0
    check(8, ok, f"pose-noise excess {excess:.2f} deg (<10), "
                 f"artifact median {art_median:.2f} deg (<15)")


# --- criterion 10: metrics / alignment suite ---------------------------------

def test_criterion_10_metrics(rng):
    gts = [Rotation(random_rotation(rng)) for _ in range(3)]
    errs = [5.0, 15.0, 45.0]
    preds = [g @ Rotation.from_axis_angle([0.0, 0.0, 1.0], np.deg2rad(e))
             for g, e in zip(gts, errs)]
    rep = compute_metrics(preds, gts)
    ok = (abs(rep.median_deg - 15.0) < 1e-9
          and abs(rep.acc30 - 2.0 / 3.0) < 1e-12
          and abs(rep.acc10 - 1.0 / 3.0) < 1e-12)

    # alignment inverts a global right-offset exactly
    c_err = Rotation(random_rotation(rng))
    moved = [p @ c_err for p in preds]
    aligned = align_predictions(moved, moved[0], preds[0])
    worst = max(np.max(np.abs(al.m - p.m)) for al, p in zip(aligned, preds))
    ok &= bool(worst < 1e-12)

    # acc10 <= acc30 over 1000 random errors
    fake_gts = [Rotation(random_rotation(rng)) for _ in range(100)]
    holds = True
    for chunk in np.split(rng.uniform(0.0, 179.9, size=1000), 10):
        pr = [g @ Rotation.from_axis_angle([1.0, 0.0, 0.0], np.deg2rad(e))
              for g, e in zip(fake_gts, chunk)]
        r = compute_metrics(pr, fake_gts)
        holds &= r.acc10 <= r.acc30
        holds &= all(0.0 <= e <= 180.0 for e in r.errors_deg)
    ok &= holds
    check(10, ok, f"hand-count exact, align max|err|={worst:.1e}, "
                  f"acc10<=acc30 holds")


# --- criterion 11: end-to-end determinism ------------------------------------

def test_criterion_11_determinism(smoke_run):
    out_a, out_b, _ = smoke_run
    same = all((out_a / name).read_bytes() == (out_b / name).read_bytes()
               for name in ("metrics.json", "metrics.csv"))
    check(11, same, "metric reports byte-identical across independent runs")
