"""Canonical-frame alignment and feature-bank merging.

Instances train in unrelated canonical frames (each base image simply got
the identity pose).  Because all banks live on one shared polyhedron, the
relative frame between two instances is a single rotation: find it by
minimizing a feature distance over a coarse SO(3) grid plus a local
box-shrinking refinement, gate the merge on that distance, then average
the aligned banks and relabel the absorbed instance's pose labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural_mesh import NeuralMesh
from .so3 import Rotation, ViewSpec, geodesic_distance, lookat
from .viewgen import ImageSet, ViewRecord


def _merge_grid(n_az: int = 24, n_el: int = 8) -> list[Rotation]:
    """Coarse rotations covering the full az/el ranges, theta = 0.

    Elevation uses band centers rather than linspace endpoints so the poles
    (gimbal-degenerate for lookat) are never sampled.
    """
    azs = -180.0 + 360.0 * np.arange(n_az) / n_az
    step = 180.0 / n_el
    els = -90.0 + step / 2.0 + step * np.arange(n_el)
    return [lookat(ViewSpec(az, el, 0.0)) for az in azs for el in els]


@dataclass(frozen=True)
class MergeConfig:
    tau_merge: float = 0.8
    k_nn: int = 4
    eps: float = 1e-6
    refine_steps: int = 5
    grid: list[Rotation] = field(default_factory=_merge_grid)

    def __post_init__(self):
        if self.tau_merge <= 0 or self.k_nn < 1:
            raise ValueError("tau_merge > 0 and k_nn >= 1 required")


def vertex_distance(v_m: np.ndarray, v_n: np.ndarray, rot: Rotation) -> float:
    return float(np.linalg.norm(v_m - rot.m @ v_n))


def interpolated_feature(nmesh: NeuralMesh, rot: Rotation, v_m: np.ndarray,
                         k_nn: int = 4, eps: float = 1e-6) -> np.ndarray:
    """Inverse-distance weighted k-NN transport of features onto point v_m
    after rotating nmesh's vertices by rot; result renormalized."""
    rotated = nmesh.mesh.vertices @ rot.m.T
    d = np.linalg.norm(rotated - v_m, axis=1)
    idx = np.argsort(d)[:k_nn]
    w = 1.0 / (d[idx] + eps)
    w /= w.sum()
    f = w @ nmesh.features[idx].astype(np.float64)
    n = np.linalg.norm(f)
    return (f / max(n, 1e-12)).astype(np.float32)


def _interp_all(nmesh: NeuralMesh, rot: Rotation, targets: np.ndarray,
                k_nn: int, eps: float) -> np.ndarray:
    """interpolated_feature for every row of targets, vectorized."""
    rotated = nmesh.mesh.vertices @ rot.m.T
    d = np.linalg.norm(targets[:, None, :] - rotated[None, :, :], axis=2)
    idx = np.argsort(d, axis=1)[:, :k_nn]
    dk = np.take_along_axis(d, idx, axis=1)
    w = 1.0 / (dk + eps)
    w /= w.sum(axis=1, keepdims=True)
    f = np.einsum("mk,mkd->md", w, nmesh.features.astype(np.float64)[idx])
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return (f / np.maximum(n, 1e-12)).astype(np.float32)


def feature_distance(mesh_j: NeuralMesh, mesh_i: NeuralMesh, rot: Rotation,
                     config: MergeConfig) -> float:
    """Mean per-vertex L2 distance between mesh_j's bank and mesh_i's bank
    transported through rot.  Unit features bound each term by [0, 2]."""
    interp = _interp_all(mesh_i, rot, mesh_j.mesh.vertices, config.k_nn, config.eps)
    return float(np.mean(np.linalg.norm(
        mesh_j.features.astype(np.float64) - interp.astype(np.float64), axis=1)))


def _lookat_offset(base: Rotation, daz: float, de: float, dth: float) -> Rotation:
    return base @ lookat(ViewSpec(daz, de, dth))


def find_relative_rotation(mesh_i: NeuralMesh, mesh_j: NeuralMesh,
                           config: MergeConfig) -> tuple[Rotation, float]:
    """argmin_R feature_distance(mesh_j, mesh_i, R): coarse grid, then a
    box-shrinking local search (27-point stencil, halved each step)."""
    best_R, best_d = None, np.inf
    for rot in config.grid:
        dist = feature_distance(mesh_j, mesh_i, rot, config)
        if dist < best_d - 1e-15:
            best_R, best_d = rot, dist
    # grid steps: az 360/24 = 15 deg, el 180/8 = 22.5 deg
    half = np.array([15.0, 22.5, 15.0])
    for _ in range(config.refine_steps):
        improved = None
        for da in (-half[0], 0.0, half[0]):
            for de in (-half[1], 0.0, half[1]):
                for dt in (-half[2], 0.0, half[2]):
                    if da == de == dt == 0.0:
                        continue
                    cand = _lookat_offset(best_R, da, de, dt)
                    dist = feature_distance(mesh_j, mesh_i, cand, config)
                    if dist < best_d - 1e-15:
                        improved, best_d = cand, dist
        if improved is not None:
            best_R = improved
        half /= 2.0
    return best_R, best_d


def merge_meshes(anchor: NeuralMesh, other: NeuralMesh, r_star: Rotation,
                 config: MergeConfig) -> tuple[NeuralMesh, bool]:
    """Average the anchor bank with the other bank transported through
    r_star when the feature distance clears tau_merge.

    r_star carries the convention of find_relative_rotation: the other
    bank read at vertex r_star @ u corresponds to the anchor bank at u,
    so reading it onto anchor vertices uses the inverse rotation.
    """
    dist = feature_distance(other, anchor, r_star, config)
    if dist >= config.tau_merge:
        return anchor, False
    interp = _interp_all(other, r_star.transpose(), anchor.mesh.vertices,
                         config.k_nn, config.eps)
    mixed = 0.5 * (anchor.features.astype(np.float64) + interp.astype(np.float64))
    n = np.linalg.norm(mixed, axis=1, keepdims=True)
    merged = (mixed / np.maximum(n, 1e-12)).astype(np.float32)
    return NeuralMesh(anchor.mesh, merged, anchor.instance_id), True


def relabel_poses(imgset: ImageSet, r_star: Rotation) -> ImageSet:
    """Right-multiply every label pose by r_star; images untouched."""
    views = [ViewRecord(v.spec, v.label @ r_star, v.image, v.mask)
             for v in imgset.views]
    return ImageSet(imgset.instance_id, imgset.camera, views, imgset.true_poses)


def merge_all(meshes: list[NeuralMesh], sets: list[ImageSet],
              config: MergeConfig, seed: int = 0):
    """Merge every instance into a seeded-random anchor.

    Returns (category mesh, relabeled sets in anchor-first order, report).
    The report lists each non-anchor instance with its R*, distance and
    merge decision.
    """
    if not meshes:
        raise ValueError("need at least one mesh")
    rng = np.random.default_rng([seed, 389])
    a = int(rng.integers(len(meshes)))
    anchor = meshes[a].copy()
    out_sets = [sets[a]]
    report = []
    for i in range(len(meshes)):
        if i == a:
            continue
        r_star, dist = find_relative_rotation(anchor, meshes[i], config)
        anchor, merged = merge_meshes(anchor, meshes[i], r_star, config)
        report.append({
            "instance_id": meshes[i].instance_id,
            "r_star": [float(x) for x in r_star.m.reshape(-1)],
            "distance": float(dist),
            "merged": bool(merged),
        })
        out_sets.append(relabel_poses(sets[i], r_star) if merged else sets[i])
    return anchor, out_sets, report
