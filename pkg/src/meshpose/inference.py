"""Multi-start render-and-compare pose estimation and evaluation metrics.

Pose search minimizes a feature reconstruction loss (one minus the mean
cosine between the rendered bank features and the encoded test image over
the rendered foreground).  The loss is evaluated through the fused
rasterize-and-score kernel; gradients come from central finite differences
on a local (az, el, theta) chart around the current pose, so no
differentiable renderer is needed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import StageError
from .neural_mesh import NeuralMesh
from .raster import Camera, pose_score
from .so3 import Rotation, ViewSpec, geodesic_distance, lookat, so3_grid

FD_STEP_DEG = 0.5
MIN_ALPHA_DEG = 0.05
MAX_ALPHA_DEG = 8.0


@dataclass(frozen=True)
class StartResult:
    init: Rotation
    final: Rotation
    loss: float
    iterations: int


@dataclass(frozen=True)
class PoseEstimate:
    pose: Rotation
    residual: float
    starts: list[StartResult]
    iterations: int


@dataclass(frozen=True)
class MetricsReport:
    median_deg: float
    acc30: float
    acc10: float
    errors_deg: list[float]


def reconstruction_loss(f_test: np.ndarray, nmesh: NeuralMesh, pose: Rotation,
                        cam: Camera) -> float:
    """1 - mean cosine similarity over the rendered foreground."""
    loss, cnt = pose_score(nmesh, pose, cam, f_test)
    if cnt == 0:
        raise StageError("infer", "pose renders no foreground pixels")
    return loss


def _chart(pose: Rotation, daz: float, de: float, dth: float) -> Rotation:
    return pose @ lookat(ViewSpec(daz, de, dth))


def _descend(f_test: np.ndarray, nmesh: NeuralMesh, cam: Camera,
             init: Rotation, steps: int, step_size: float) -> StartResult:
    pose = init
    loss = reconstruction_loss(f_test, nmesh, pose, cam)
    alpha = step_size
    h = FD_STEP_DEG
    used = 0
    for it in range(steps):
        grad = np.empty(3)
        for a, axis in enumerate(((h, 0.0, 0.0), (0.0, h, 0.0), (0.0, 0.0, h))):
            lp = reconstruction_loss(f_test, nmesh, _chart(pose, *axis), cam)
            lm = reconstruction_loss(
                f_test, nmesh, _chart(pose, -axis[0], -axis[1], -axis[2]), cam)
            grad[a] = (lp - lm) / (2.0 * h)
        gn = float(np.linalg.norm(grad))
        if gn < 1e-12:
            break
        dirn = -grad / gn
        accepted = False
        while alpha >= MIN_ALPHA_DEG:
            cand = _chart(pose, alpha * dirn[0], alpha * dirn[1], alpha * dirn[2])
            cl = reconstruction_loss(f_test, nmesh, cand, cam)
            if cl < loss:
                pose, loss = cand, cl
                alpha = min(alpha * 2.0, MAX_ALPHA_DEG)
                accepted = True
                break
            alpha /= 2.0
        used = it + 1
        if not accepted:
            break
    return StartResult(init, pose, loss, used)


def estimate_pose(f_test: np.ndarray, nmesh: NeuralMesh, cam: Camera,
                  inits: list[Rotation] | None = None, steps: int = 50,
                  step_size: float = 2.0) -> PoseEstimate:
    """Best of independent descents from each init (ties: lowest index)."""
    if inits is None:
        inits = so3_grid(12, 4, 3)
    if not inits:
        raise ValueError("need at least one init")
    starts = [_descend(f_test, nmesh, cam, init, steps, step_size)
              for init in inits]
    best = min(range(len(starts)), key=lambda i: (starts[i].loss, i))
    return PoseEstimate(starts[best].final, starts[best].loss, starts,
                        starts[best].iterations)


def align_predictions(preds: list[Rotation], anchor_pred: Rotation,
                      anchor_gt: Rotation) -> list[Rotation]:
    """Solve the canonical-to-dataset frame from one annotated image:
    C = anchor_pred^T anchor_gt, applied as P -> P C."""
    c = anchor_pred.transpose() @ anchor_gt
    return [p @ c for p in preds]


def compute_metrics(preds: list[Rotation], gts: list[Rotation]) -> MetricsReport:
    """Geodesic errors in degrees; lower median; inclusive thresholds."""
    if not preds or len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists must match and be non-empty")
    errors = [float(np.degrees(geodesic_distance(p, g)))
              for p, g in zip(preds, gts)]
    ordered = sorted(errors)
    median = ordered[(len(ordered) - 1) // 2]
    acc30 = float(np.mean([e <= 30.0 for e in errors]))
    acc10 = float(np.mean([e <= 10.0 for e in errors]))
    return MetricsReport(median, acc30, acc10, errors)


def save_eval_report(path_json, path_csv, report: MetricsReport,
                     ids: list[str], preds: list[Rotation],
                     gts: list[Rotation], config_digest: str) -> None:
    per_image = [{
        "id": ids[i],
        "pred": [float(x) for x in preds[i].m.reshape(-1)],
        "gt": [float(x) for x in gts[i].m.reshape(-1)],
        "error_deg": report.errors_deg[i],
    } for i in range(len(ids))]
    blob = {
        "config_digest": config_digest,
        "per_image": per_image,
        "median": report.median_deg,
        "acc30": report.acc30,
        "acc10": report.acc10,
    }
    with open(path_json, "w") as fh:
        json.dump(blob, fh, indent=1)
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "error_deg"])
        for row in per_image:
            writer.writerow([row["id"], f"{row['error_deg']:.6f}"])
