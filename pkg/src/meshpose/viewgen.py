"""Synthetic posed-view generation and image-set disk ingestion.

Stands in for a pose-conditioned image generator: each instance is a
level-2 geodesic polyhedron with a procedural albedo field and mild radial
shape jitter, rendered flat-shaded over a constant background.  The view
labels are always the exact nominal poses; pose_sigma jitters only the
TRUE rendering pose, reproducing the pseudo-label noise the pipeline has
to survive.  Instances of one family share a base albedo field so their
feature banks have transferable structure.

A hidden per-instance canonical offset rotates the object's intrinsic
frame before the view rotation is applied (render pose = lookat(view) @
offset).  Labels never see the offset, so every instance trains in its own
canonical frame and the merge stage has a real relative rotation to
recover.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError
from .icosphere import PolyMesh, build_geodesic_polyhedron
from .raster import Camera, render_flat
from .so3 import Rotation, ViewSpec, lookat

GRID_AZ = (0.0, 15.0, -15.0, 30.0, -30.0, 45.0, -45.0, 60.0, -60.0,
           90.0, -90.0, 180.0)
GRID_EL = (0.0, 15.0, -15.0, 30.0, -30.0, 45.0, -45.0)
N_VIEWS = len(GRID_AZ) * len(GRID_EL) + 1  # 84 grid views + clean base view
BACKGROUND = 0.5


@dataclass(frozen=True)
class SyntheticObject:
    """A procedurally textured instance: shared base geometry for training,
    jittered geometry + albedo for rendering."""

    instance_id: str
    mesh: PolyMesh
    render_mesh: PolyMesh
    albedo: np.ndarray
    canonical_offset: Rotation = field(default_factory=Rotation.identity)


@dataclass(frozen=True)
class NoiseConfig:
    pose_sigma: float = 0.0
    texture_sigma: float = 0.0
    artifact_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pose_sigma < 0 or self.texture_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.artifact_rate <= 1.0:
            raise ValueError("artifact_rate must be in [0, 1]")


@dataclass(frozen=True)
class ViewRecord:
    spec: ViewSpec
    label: Rotation
    image: np.ndarray
    mask: np.ndarray


@dataclass
class ImageSet:
    """All views of one instance.  views[0] is the clean base image (the
    'origin image') labeled with the identity delta; views[1:] follow the
    generation grid.  true_poses records the actually rendered poses and is
    never persisted with the set."""

    instance_id: str
    camera: Camera
    views: list[ViewRecord]
    true_poses: list[Rotation] | None = None

    @property
    def base(self) -> ViewRecord:
        return self.views[0]


def _field_on_sphere(verts: np.ndarray, rng: np.random.Generator,
                     n_waves: int = 6) -> np.ndarray:
    """Smooth random scalar field over unit vectors, roughly in [-1, 1]."""
    u = rng.standard_normal((n_waves, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    freq = rng.uniform(1.0, 4.0, n_waves)
    phase = rng.uniform(0.0, 2.0 * np.pi, n_waves)
    amp = rng.uniform(0.5, 1.0, n_waves)
    f = np.zeros(len(verts))
    for i in range(n_waves):
        f += amp[i] * np.cos(freq[i] * (verts @ u[i]) + phase[i])
    return np.tanh(f / np.sqrt(n_waves))


def _albedo_field(verts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([0.5 + 0.45 * _field_on_sphere(verts, rng) for _ in range(3)],
                    axis=1)


def _id_rng(seed: int, instance_id: str) -> np.random.Generator:
    digest = hashlib.sha256(instance_id.encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def build_instance(family_seed: int, index: int, level: int = 2,
                   variation: float = 0.35,
                   canonical_offset: Rotation | None = None) -> SyntheticObject:
    """Instance ``index`` of a procedural family.

    Albedo blends a family-wide base field with an instance field
    (weight ``variation``), so instances look related but distinct; shape
    gets a smooth radial jitter bounded by 0.1 r.
    """
    mesh = build_geodesic_polyhedron(level)
    iid = f"fam{family_seed}-obj{index:03d}"
    fam_rng = np.random.default_rng([family_seed, 977])
    inst_rng = _id_rng(family_seed, iid)
    base = _albedo_field(mesh.vertices, fam_rng)
    inst = _albedo_field(mesh.vertices, inst_rng)
    albedo = np.clip((1.0 - variation) * base + variation * inst, 0.0, 1.0)
    radial = 0.1 * _field_on_sphere(mesh.vertices, inst_rng)
    render_mesh = PolyMesh(mesh.vertices * (1.0 + radial[:, None]), mesh.faces)
    return SyntheticObject(
        instance_id=iid, mesh=mesh, render_mesh=render_mesh, albedo=albedo,
        canonical_offset=canonical_offset or Rotation.identity())


def view_grid() -> list[ViewSpec]:
    """The fixed 12 azimuth x 7 elevation generation grid, azimuth-major."""
    return [ViewSpec(az, el, 0.0) for az in GRID_AZ for el in GRID_EL]


def _face_colors(mesh: PolyMesh, albedo: np.ndarray) -> np.ndarray:
    return albedo[mesh.faces].mean(axis=1)


def _render_view(obj: SyntheticObject, pose: Rotation, cam: Camera,
                 rng: np.random.Generator | None, noise: NoiseConfig):
    colors = _face_colors(obj.render_mesh, obj.albedo)
    img, fg = render_flat(obj.render_mesh, colors, pose, cam, BACKGROUND)
    if rng is not None:
        if noise.texture_sigma > 0:
            img = img + rng.normal(0.0, noise.texture_sigma, img.shape)
        if noise.artifact_rate > 0 and rng.random() < noise.artifact_rate:
            ph = rng.integers(cam.image_h // 10, cam.image_h // 4)
            pw = rng.integers(cam.image_w // 10, cam.image_w // 4)
            i0 = rng.integers(0, cam.image_h - ph)
            j0 = rng.integers(0, cam.image_w - pw)
            img[i0:i0 + ph, j0:j0 + pw] = rng.random((ph, pw, 3))
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0 + 0.5).astype(np.uint8), fg


def generate_image_set(obj: SyntheticObject, grid: list[ViewSpec],
                       noise: NoiseConfig, cam: Camera) -> ImageSet:
    """Render the clean base view plus one image per grid spec.

    Labels are lookat(spec) exactly; the rendered pose adds Gaussian
    (az, el) jitter and the instance's hidden canonical offset.
    Deterministic in (noise.seed, obj.instance_id).
    """
    rng = _id_rng(noise.seed, obj.instance_id)
    views: list[ViewRecord] = []
    true_poses: list[Rotation] = []

    base_spec = ViewSpec(0.0, 0.0, 0.0)
    base_pose = lookat(base_spec) @ obj.canonical_offset
    img, fg = _render_view(obj, base_pose, cam, None, noise)
    views.append(ViewRecord(base_spec, lookat(base_spec), img, fg))
    true_poses.append(base_pose)

    for spec in grid:
        daz, de = rng.normal(0.0, noise.pose_sigma, 2) if noise.pose_sigma > 0 else (0.0, 0.0)
        az = (spec.az + daz + 180.0) % 360.0 - 180.0
        el = float(np.clip(spec.el + de, -89.9, 89.9))
        true = lookat(ViewSpec(az, el, spec.theta)) @ obj.canonical_offset
        img, fg = _render_view(obj, true, cam, rng, noise)
        views.append(ViewRecord(spec, lookat(spec), img, fg))
        true_poses.append(true)
    return ImageSet(obj.instance_id, cam, views, true_poses)


def save_image_set(imgset: ImageSet, directory) -> None:
    """manifest.json + views/NNN.png + masks/NNN.png (8-bit PNG)."""
    root = Path(directory)
    (root / "views").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    cam = imgset.camera
    entries = []
    for n, view in enumerate(imgset.views):
        ipath, mpath = f"views/{n:03d}.png", f"masks/{n:03d}.png"
        Image.fromarray(view.image, "RGB").save(root / ipath)
        Image.fromarray(view.mask.astype(np.uint8) * 255, "L").save(root / mpath)
        entries.append({
            "az": view.spec.az, "el": view.spec.el, "theta": view.spec.theta,
            "pose": [float(x) for x in view.label.m.reshape(-1)],
            "image": ipath, "mask": mpath,
        })
    manifest = {
        "instance_id": imgset.instance_id,
        "camera": {"distance": cam.distance, "focal": cam.focal,
                   "image_w": cam.image_w, "image_h": cam.image_h,
                   "stride": cam.stride},
        "views": entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def _mask_coverage_ok(mask: np.ndarray) -> bool:
    frac = float(mask.mean())
    return 0.01 <= frac <= 0.90


def load_image_set(directory) -> ImageSet:
    """Load and fully validate a saved set; raises ManifestError with a
    distinct code per violation class."""
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ManifestError("missing-file", f"{mpath} does not exist")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError("malformed-manifest", f"{mpath}: {e}") from e

    try:
        iid = manifest["instance_id"]
        camd = manifest["camera"]
        entries = manifest["views"]
        cam_args = {k: camd[k] for k in ("distance", "focal", "image_w",
                                         "image_h", "stride")}
    except (KeyError, TypeError) as e:
        raise ManifestError("malformed-manifest", f"{mpath}: missing field {e}") from e
    try:
        cam = Camera(**cam_args)
    except Exception as e:
        raise ManifestError("bad-camera", f"{mpath}: {e}") from e

    if len(entries) != N_VIEWS:
        raise ManifestError("view-count",
                            f"{mpath}: expected {N_VIEWS} views, found {len(entries)}")

    views = []
    for n, ent in enumerate(entries):
        try:
            spec = ViewSpec(float(ent["az"]), float(ent["el"]), float(ent["theta"]))
            pose_vals = np.array(ent["pose"], dtype=np.float64)
            ipath = root / ent["image"]
            mkpath = root / ent["mask"]
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError("malformed-manifest", f"view {n}: {e}") from e
        if pose_vals.shape != (9,):
            raise ManifestError("bad-pose", f"view {n}: pose needs 9 values")
        try:
            label = Rotation(pose_vals.reshape(3, 3))
        except ValueError as e:
            raise ManifestError("bad-pose", f"view {n}: {e}") from e
        if np.abs(label.m - lookat(spec).m).max() > 1e-9:
            raise ManifestError("bad-pose",
                                f"view {n}: pose does not match its view spec")
        if not ipath.is_file() or not mkpath.is_file():
            raise ManifestError("missing-file", f"view {n}: image or mask missing")
        img = np.asarray(Image.open(ipath).convert("RGB"))
        mask = np.asarray(Image.open(mkpath).convert("L")) >= 128
        if img.shape != (cam.image_h, cam.image_w, 3) or mask.shape != img.shape[:2]:
            raise ManifestError("malformed-manifest",
                                f"view {n}: image size does not match camera")
        if not _mask_coverage_ok(mask):
            raise ManifestError("mask-coverage",
                                f"view {n}: foreground fraction {mask.mean():.3f} "
                                "outside [0.01, 0.90]")
        views.append(ViewRecord(spec, label, img, mask))
    return ImageSet(iid, cam, views)
