"""Pinhole projection, z-buffer depth rendering and vertex visibility.

Camera convention, shared by every stage of the pipeline:

* the camera sits at Q = (0, 0, -D) looking down +Z with up = +Y,
* a pose rotates the object in world space; the camera never moves,
* camera-frame axis depth of a rotated vertex (x, y, z) is zc = z + D,
* image coordinates: u = cx + focal * x / zc, v = cy - focal * y / zc
  with (cx, cy) = (image_w / 2, image_h / 2),
* a render target at stride t has pixel (i, j) sampling the continuous
  image point (u = j * t, v = i * t), so feature-map coordinates are
  image coordinates divided by the stride.

Depth maps store the Euclidean vertex-to-camera distance (not the axis
depth): the rasterizer interpolates 1/zc perspective-correctly and scales
by the per-pixel ray length sqrt(1 + ax^2 + ay^2), which is exactly the
distance from Q to the ray-triangle intersection point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .errors import ConfigError
from .icosphere import PolyMesh
from .so3 import Rotation

BLOB_MAGIC = b"NMFM"


@dataclass(frozen=True)
class Camera:
    """Fixed pinhole camera at distance ``distance`` from the origin.

    The feature map rendered for training and inference is
    (image_h / stride) x (image_w / stride).
    """

    distance: float
    focal: float
    image_w: int
    image_h: int
    stride: int

    def __post_init__(self):
        if self.distance <= 0 or self.focal <= 0:
            raise ConfigError("camera distance and focal must be > 0")
        if self.image_w <= 0 or self.image_h <= 0 or self.stride <= 0:
            raise ConfigError("camera image size and stride must be > 0")
        if self.image_w % self.stride or self.image_h % self.stride:
            raise ConfigError(
                f"image size {self.image_w}x{self.image_h} not divisible "
                f"by stride {self.stride}"
            )

    @property
    def feature_w(self) -> int:
        return self.image_w // self.stride

    @property
    def feature_h(self) -> int:
        return self.image_h // self.stride


@dataclass(frozen=True)
class VertexScreenData:
    """Per-vertex screen-space data: (K, 2) pixel coordinates in the target
    grid, (K,) Euclidean camera distances and, once computed, (K,) uint8
    visibility flags."""

    pixels: np.ndarray
    dists: np.ndarray
    visible: np.ndarray | None = None


def _check_inside(cam: Camera, mesh: PolyMesh) -> None:
    if cam.distance <= mesh.radius:
        raise ConfigError(
            f"camera distance {cam.distance} must exceed mesh radius {mesh.radius}"
        )


def _screen_vertices(mesh: PolyMesh, pose: Rotation, cam: Camera, stride: int):
    """Project vertices into the grid of the given stride.

    Returns contiguous float64 (xs, ys, zc) with xs/ys in target-pixel
    coordinates and zc the camera-frame axis depth.
    """
    rot = mesh.vertices @ pose.m.T
    zc = rot[:, 2] + cam.distance
    if zc.size and zc.min() <= 0:
        raise ConfigError("vertex behind camera; distance must exceed radius")
    cx, cy = cam.image_w / 2.0, cam.image_h / 2.0
    xs = (cx + cam.focal * rot[:, 0] / zc) / stride
    ys = (cy - cam.focal * rot[:, 1] / zc) / stride
    return (np.ascontiguousarray(xs), np.ascontiguousarray(ys),
            np.ascontiguousarray(zc))


def _grid_rays(cam: Camera, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-column / per-row ray direction components (x/zc and y/zc) for
    pixel centers of the target grid."""
    w = cam.image_w // stride
    h = cam.image_h // stride
    cx, cy = cam.image_w / 2.0, cam.image_h / 2.0
    ax = (np.arange(w, dtype=np.float64) * stride - cx) / cam.focal
    ay = (cy - np.arange(h, dtype=np.float64) * stride) / cam.focal
    return np.ascontiguousarray(ax), np.ascontiguousarray(ay)


def project_vertices(mesh: PolyMesh, pose: Rotation, cam: Camera) -> VertexScreenData:
    """Project all vertices to feature-map coordinates.

    ``dists`` is the Euclidean distance from the camera center to the
    rotated vertex; visibility is left unset.
    """
    _check_inside(cam, mesh)
    rot = mesh.vertices @ pose.m.T
    zc = rot[:, 2] + cam.distance
    cx, cy = cam.image_w / 2.0, cam.image_h / 2.0
    u = (cx + cam.focal * rot[:, 0] / zc) / cam.stride
    v = (cy - cam.focal * rot[:, 1] / zc) / cam.stride
    d = np.sqrt(rot[:, 0] ** 2 + rot[:, 1] ** 2 + zc ** 2)
    return VertexScreenData(pixels=np.stack([u, v], axis=1), dists=d)


def rasterize_mesh(mesh: PolyMesh, pose: Rotation, cam: Camera, stride: int):
    """Shared z-buffer pass. Returns (dist, tri, bary) at the given stride:
    per-pixel camera distance (+inf background), frontmost triangle index
    (-1 background) and perspective-correct barycentric weights."""
    _check_inside(cam, mesh)
    xs, ys, zc = _screen_vertices(mesh, pose, cam, stride)
    ax, ay = _grid_rays(cam, stride)
    return backend.rasterize(xs, ys, zc, mesh.faces, ax, ay)


def render_depth(mesh: PolyMesh, pose: Rotation, cam: Camera) -> np.ndarray:
    """Feature-map resolution depth render; background pixels are +inf."""
    dist, _, _ = rasterize_mesh(mesh, pose, cam, cam.stride)
    return dist


def compute_visibility(screen: VertexScreenData, depth: np.ndarray,
                       tau_r: float) -> VertexScreenData:
    """Flag vertices whose depth agrees with the rendered map.

    A vertex is visible iff its pixel lies inside the map bounds and the
    depth at one of the integer pixels surrounding p_k is within tau_r of
    d_k.  Checking the surrounding pixels instead of only the rounded one
    matters at the silhouette: boundary vertices project onto the edge of
    the foreground region, where the single nearest pixel is background
    (+inf) for roughly half of them, which would flag unoccluded vertices
    as hidden.  Depths are compared, never interpolated, so foreground and
    background values still never mix.
    """
    h, w = depth.shape
    u = screen.pixels[:, 0]
    v = screen.pixels[:, 1]
    inb = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    close = np.zeros(len(u), dtype=bool)
    for du, dv in ((0, 0), (1, 0), (0, 1), (1, 1)):
        ui = (u0 + du).clip(0, w - 1)
        vi = (v0 + dv).clip(0, h - 1)
        close |= np.abs(depth[vi, ui] - screen.dists) <= tau_r
    vis = (inb & close).astype(np.uint8)
    return VertexScreenData(pixels=screen.pixels, dists=screen.dists, visible=vis)


def render_feature_map(nmesh, pose: Rotation, cam: Camera):
    """Rasterize a neural mesh's vertex features.

    ``nmesh`` carries ``.mesh`` (PolyMesh) and ``.features`` ((K, d) float32
    unit rows).  Returns (fmap, fg): (h, w, d) float32 with zero vectors on
    the background, and the boolean foreground mask.  Foreground pixels are
    barycentric blends of the corner features renormalized to unit length,
    so the map satisfies the same per-pixel norm convention as encoder
    output.
    """
    mesh = nmesh.mesh
    feats = nmesh.features
    _, tri, bary = rasterize_mesh(mesh, pose, cam, cam.stride)
    h, w = tri.shape
    fmap = np.zeros((h, w, feats.shape[1]), dtype=np.float32)
    fg = tri >= 0
    if fg.any():
        idx = mesh.faces[tri[fg]]
        b = bary[fg]
        f64 = feats.astype(np.float64)
        mix = (b[:, 0, None] * f64[idx[:, 0]]
               + b[:, 1, None] * f64[idx[:, 1]]
               + b[:, 2, None] * f64[idx[:, 2]])
        norms = np.linalg.norm(mix, axis=1, keepdims=True)
        fmap[fg] = (mix / np.maximum(norms, 1e-12)).astype(np.float32)
    return fmap, fg


def render_flat(mesh: PolyMesh, face_colors: np.ndarray, pose: Rotation,
                cam: Camera, background: float = 0.5):
    """Full image-resolution flat-shaded render.

    ``face_colors`` is (F, 3) in [0, 1].  Returns (image, mask): (H, W, 3)
    float64 and the boolean foreground mask.
    """
    _, tri, _ = rasterize_mesh(mesh, pose, cam, 1)
    img = np.full((cam.image_h, cam.image_w, 3), background, dtype=np.float64)
    fg = tri >= 0
    if fg.any():
        img[fg] = face_colors[tri[fg]]
    return img, fg


def pose_score(nmesh, pose: Rotation, cam: Camera, ftest: np.ndarray):
    """Fused render-and-compare: 1 - mean cosine similarity between the
    rendered vertex features and ``ftest`` over the rendered foreground.
    Returns (loss, n_foreground); an empty foreground scores 1.0."""
    mesh = nmesh.mesh
    _check_inside(cam, mesh)
    ftest = np.ascontiguousarray(ftest, dtype=np.float32)
    xs, ys, zc = _screen_vertices(mesh, pose, cam, cam.stride)
    ax, ay = _grid_rays(cam, cam.stride)
    return backend.render_score(xs, ys, zc, mesh.faces, ax, ay,
                                nmesh.features, ftest)


def save_map_blob(path, arr: np.ndarray) -> None:
    """Persist a depth or feature map: 16-byte header (magic, u32 c/h/w)
    then c*h*w little-endian float32, channel-major."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (h, w) or (h, w, c) map, got {a.shape}")
    h, w, c = a.shape
    chw = np.ascontiguousarray(a.transpose(2, 0, 1).astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<III", c, h, w))
        fh.write(chw.tobytes())


def load_map_blob(path) -> np.ndarray:
    """Inverse of save_map_blob; returns (h, w, c) float32."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: not a feature map blob")
    c, h, w = struct.unpack("<III", raw[4:16])
    need = 16 + 4 * c * h * w
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    return flat.reshape(c, h, w).transpose(1, 2, 0).copy()
