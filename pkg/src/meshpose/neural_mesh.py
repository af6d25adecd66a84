"""Vertex feature banks, contrastive losses and the training loop.

Each instance owns a bank of unit feature vectors attached to the shared
polyhedron vertices.  Banks are not optimized by gradient descent: visible
vertices absorb the encoder's sampled features through momentum updates,
while the encoder itself is trained by a contrastive loss that pulls each
visible pixel feature toward its own vertex and away from all non-neighbor
vertices and the background bank.  A second loss clusters background
pixels onto a small background bank with the vertex features as negatives.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .errors import ConfigError
from .icosphere import PolyMesh, build_geodesic_polyhedron, vertex_neighborhoods
from .raster import Camera, VertexScreenData, compute_visibility, project_vertices, render_depth
from .so3 import Rotation

BANK_MAGIC = b"NMBK"

# Both losses are sums over their sampled terms, so the raw encoder
# gradient scales with the visible-vertex and background-sample counts
# and its first steps can exceed the weight norms severalfold, after
# which the per-pixel normalization freezes the net (the 1/|z| Jacobian
# vanishes).  Clipping the global gradient norm before the SGD step
# keeps the update bounded without touching the loss definition.
GRAD_CLIP = 10.0


@dataclass
class NeuralMesh:
    """Shared geometry plus per-vertex unit features (K, d) float32."""

    mesh: PolyMesh
    features: np.ndarray
    instance_id: str = ""

    def copy(self) -> "NeuralMesh":
        return NeuralMesh(self.mesh, self.features.copy(), self.instance_id)


@dataclass
class BackgroundBank:
    features: np.ndarray  # (B, d) float32, unit rows


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the joint encoder + bank training.

    tau_r and rho are fractions of the mesh radius (depth agreement
    threshold for visibility, and the neighborhood arc radius excluded
    from the negative set).
    """

    d: int = 64
    level: int = 2
    epochs: int = 30
    lr: float = 0.01
    beta: float = 0.9
    kappa: float = 1.0 / 0.07
    rho: float = 0.1
    tau_r: float = 0.05
    bank_size: int = 512
    bg_samples: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must be in [0, 1)")
        if self.kappa <= 0 or self.rho < 0 or self.tau_r <= 0:
            raise ConfigError("kappa and tau_r must be > 0, rho >= 0")
        if self.epochs < 0 or self.lr <= 0 or self.d < 1:
            raise ConfigError("epochs >= 0, lr > 0, d >= 1 required")


@dataclass
class TrainResult:
    encoder: enc.EncoderParams
    meshes: list[NeuralMesh]
    bank: BackgroundBank
    loss_history: list[float]
    skipped_views: int = 0


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)


def init_neural_mesh(mesh: PolyMesh, d: int, seed: int,
                     instance_id: str = "") -> NeuralMesh:
    rng = np.random.default_rng([seed, 131])
    return NeuralMesh(mesh, _unit_rows(rng, len(mesh.vertices), d), instance_id)


def init_background_bank(d: int, size: int, seed: int) -> BackgroundBank:
    rng = np.random.default_rng([seed, 499])
    return BackgroundBank(_unit_rows(rng, size, d))


def _renorm(rows: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(rows, axis=-1, keepdims=True)
    return (rows / np.maximum(n, 1e-12)).astype(np.float32)


def momentum_update(nmesh: NeuralMesh, feats: np.ndarray, vis: np.ndarray,
                    beta: float) -> NeuralMesh:
    """theta_k <- o_k (1-beta) f_k + (1 - o_k + beta o_k) theta_k, renormalized.

    Invisible rows (o_k = 0) pass through bit-identical: the formula keeps
    them at theta_k, and skipping their renormalization avoids ulp drift
    from repeated no-op updates.
    """
    on = vis.astype(bool)
    out = nmesh.features.copy()
    mixed = ((1.0 - beta) * feats[on].astype(np.float32)
             + beta * nmesh.features[on])
    out[on] = _renorm(mixed)
    return NeuralMesh(nmesh.mesh, out, nmesh.instance_id)


def _nonneighbor_masks(mesh: PolyMesh, rho_abs: float) -> np.ndarray:
    """(K, K) bool: columns allowed in vertex k's denominator.  The vertex
    itself stays included (it is the positive); other neighbors are out."""
    hoods = vertex_neighborhoods(mesh, rho_abs)
    K = len(mesh.vertices)
    allowed = np.ones((K, K), dtype=bool)
    for k, hood in enumerate(hoods):
        allowed[k, hood] = False
        allowed[k, k] = True
    return allowed


def _fg_loss_core(f_vis: np.ndarray, vis_idx: np.ndarray, theta: np.ndarray,
                  bg: np.ndarray, kappa: float, allowed: np.ndarray):
    """Contrastive loss over sampled visible-vertex features.

    Returns (loss, dL/df_vis).  Denominator per vertex k: its own logit,
    every non-neighbor vertex logit, and all background bank logits.
    """
    f64 = f_vis.astype(np.float64)
    lm = kappa * (f64 @ theta.astype(np.float64).T)  # (n, K)
    lb = kappa * (f64 @ bg.astype(np.float64).T) if len(bg) else np.zeros((len(f64), 0))
    mask = allowed[vis_idx]
    neg = np.where(mask, lm, -np.inf)
    allv = np.concatenate([neg, lb], axis=1)
    mx = allv.max(axis=1)
    ex = np.exp(allv - mx[:, None])
    Z = ex.sum(axis=1)
    own = lm[np.arange(len(vis_idx)), vis_idx]
    loss = float(np.sum(mx + np.log(Z) - own))
    p = ex / Z[:, None]
    # dL/dlogit = p - onehot(own); logits are kappa * f . c
    dlm = p[:, :theta.shape[0]]
    dlm[np.arange(len(vis_idx)), vis_idx] -= 1.0
    gf = kappa * (dlm @ theta.astype(np.float64))
    if len(bg):
        gf += kappa * (p[:, theta.shape[0]:] @ bg.astype(np.float64))
    return loss, gf


def foreground_loss(fmap: np.ndarray, screen: VertexScreenData,
                    nmesh: NeuralMesh, bg: BackgroundBank, kappa: float,
                    allowed: np.ndarray):
    """(loss, gradient w.r.t. fmap) for one view.

    ``allowed`` is the (K, K) non-neighbor mask from _nonneighbor_masks.
    Zero visible vertices yields (0.0, zero gradient): the caller treats
    that as a skipped view rather than an error.
    """
    vis_idx = np.nonzero(screen.visible == 1)[0]
    gmap = np.zeros_like(fmap)
    if len(vis_idx) == 0:
        return 0.0, gmap
    f_vis, cache = enc.sample_features(fmap, screen.pixels[vis_idx])
    loss, gf = _fg_loss_core(f_vis, vis_idx, nmesh.features, bg.features,
                             kappa, allowed)
    enc.scatter_sample_grad(cache, gf.astype(fmap.dtype), gmap)
    return loss, gmap


def _bg_loss_core(f_bg: np.ndarray, bank: np.ndarray, theta: np.ndarray,
                  kappa: float):
    """Pull sampled background features to their nearest bank entry with the
    vertex bank as negatives.  Returns (loss, dL/df_bg, assignment)."""
    f64 = f_bg.astype(np.float64)
    sims = kappa * (f64 @ bank.astype(np.float64).T)
    assign = np.argmax(sims, axis=1)
    pos = sims[np.arange(len(f64)), assign]
    ln = kappa * (f64 @ theta.astype(np.float64).T) if len(theta) else np.zeros((len(f64), 0))
    allv = np.concatenate([pos[:, None], ln], axis=1)
    mx = allv.max(axis=1)
    ex = np.exp(allv - mx[:, None])
    Z = ex.sum(axis=1)
    loss = float(np.sum(mx + np.log(Z) - pos))
    p = ex / Z[:, None]
    gf = kappa * (p[:, 0] - 1.0)[:, None] * bank[assign].astype(np.float64)
    if len(theta):
        gf += kappa * (p[:, 1:] @ theta.astype(np.float64))
    return loss, gf, assign


def background_loss(fmap: np.ndarray, bg_pixels: np.ndarray,
                    bg: BackgroundBank, negatives: np.ndarray, kappa: float,
                    beta: float = 0.9):
    """(loss, gradient w.r.t. fmap, updated bank) over given background
    pixels ((m, 2) integer (row, col)); ``negatives`` are the vertex
    features.  No pixels: zero loss, bank unchanged."""
    gmap = np.zeros_like(fmap)
    if len(bg_pixels) == 0:
        return 0.0, gmap, bg
    f_bg = fmap[bg_pixels[:, 0], bg_pixels[:, 1]]
    loss, gf, assign = _bg_loss_core(f_bg, bg.features, negatives, kappa)
    np.add.at(gmap, (bg_pixels[:, 0], bg_pixels[:, 1]), gf.astype(fmap.dtype))
    newbank = bg.features.copy()
    for b in np.unique(assign):
        mean_f = f_bg[assign == b].mean(axis=0)
        newbank[b] = beta * newbank[b] + (1.0 - beta) * mean_f
    return loss, gmap, BackgroundBank(_renorm(newbank))


def _downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Feature-resolution foreground mask: a cell is foreground if any
    image pixel inside it is."""
    h, w = mask.shape
    return mask.reshape(h // stride, stride, w // stride, stride).any(axis=(1, 3))


def _core_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Cells whose every image pixel is foreground (no silhouette overlap)."""
    h, w = mask.shape
    return mask.reshape(h // stride, stride, w // stride, stride).all(axis=(1, 3))


def _interior_flags(screen: VertexScreenData, core: np.ndarray) -> np.ndarray:
    """True where a vertex's bilinear sampling stencil touches only cells
    fully inside the image foreground.

    Features of silhouette-straddling cells mix the constant background
    appearance into the sample; because which vertices graze the silhouette
    is a function of the shared label grid (not of the instance), that
    contamination is systematic across instances and skews cross-bank
    alignment.  Sampling is therefore restricted to interior stencils.
    """
    h, w = core.shape
    x0 = np.clip(np.floor(screen.pixels[:, 0]).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(screen.pixels[:, 1]).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return core[y0, x0] & core[y0, x1] & core[y1, x0] & core[y1, x1]


def _view_cache(mesh: PolyMesh, imgset, tau_abs: float):
    """Precompute label-pose screen data, visibility, interior-sample flags
    and background candidate pixels for every view (labels are constant
    across epochs)."""
    cam = imgset.camera
    out = []
    for view in imgset.views:
        screen = project_vertices(mesh, view.label, cam)
        depth = render_depth(mesh, view.label, cam)
        screen = compute_visibility(screen, depth, tau_abs)
        anyfg = _downsample_mask(view.mask, cam.stride)
        bg_px = np.argwhere(~anyfg)
        interior = _interior_flags(screen, _core_mask(view.mask, cam.stride))
        out.append((screen, bg_px, interior))
    return out


def train(instances: list, config: TrainConfig) -> TrainResult:
    """Joint training over all instances' views.

    Per view: encode, sample visible vertices at the label pose, apply the
    two contrastive losses, one SGD step on the encoder (cosine-decayed
    lr), then momentum updates of the touched banks.  Deterministic for a
    fixed config.seed.
    """
    if not instances:
        raise ConfigError("need at least one instance")
    cam = instances[0].camera
    if any(s.camera != cam for s in instances):
        raise ConfigError("all image sets must share one camera")

    mesh = build_geodesic_polyhedron(config.level)
    r = mesh.radius
    params = enc.init_encoder(config.d, seed=config.seed)
    meshes = [init_neural_mesh(mesh, config.d, config.seed + 7 * i, s.instance_id)
              for i, s in enumerate(instances)]
    bank = init_background_bank(config.d, config.bank_size, config.seed)
    allowed = _nonneighbor_masks(mesh, config.rho * r)
    caches = [_view_cache(mesh, s, config.tau_r * r) for s in instances]

    pairs = [(yi, vi) for yi, s in enumerate(instances) for vi in range(len(s.views))]
    total_steps = max(config.epochs * len(pairs), 1)
    rng = np.random.default_rng([config.seed, 271])
    history: list[float] = []
    skipped = 0
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for oi in order:
            yi, vi = pairs[oi]
            view = instances[yi].views[vi]
            screen, bg_px, interior = caches[yi][vi]
            lr_t = config.lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1

            vis_idx = np.nonzero((screen.visible == 1) & interior)[0]
            if len(vis_idx) == 0:
                # tiny renders may leave no interior stencil at all
                vis_idx = np.nonzero(screen.visible == 1)[0]
            if len(vis_idx) == 0:
                skipped += 1
                continue
            fmap, fcache = enc.encode_full(params, view.image.astype(np.float32) / 255.0)

            f_vis, scache = enc.sample_features(fmap, screen.pixels[vis_idx])
            fg_loss, gf = _fg_loss_core(f_vis, vis_idx, meshes[yi].features,
                                        bank.features, config.kappa, allowed)
            gmap = np.zeros_like(fmap)
            enc.scatter_sample_grad(scache, gf.astype(fmap.dtype), gmap)

            if len(bg_px) > config.bg_samples:
                pick = rng.choice(len(bg_px), config.bg_samples, replace=False)
                px = bg_px[pick]
            else:
                px = bg_px
            bg_loss, bgmap, bank = background_loss(
                fmap, px, bank, meshes[yi].features, config.kappa, config.beta)
            gmap += bgmap

            wg, bgr = enc.encode_backward(params, fcache, gmap)
            gn = np.sqrt(sum(float(np.sum(g * g)) for g in wg)
                         + sum(float(np.sum(g * g)) for g in bgr))
            clip = min(1.0, GRAD_CLIP / gn) if gn > 0 else 1.0
            for w, g in zip(params.weights, wg):
                w -= lr_t * clip * g
            for b, g in zip(params.biases, bgr):
                b -= lr_t * clip * g

            feats = np.zeros_like(meshes[yi].features)
            feats[vis_idx] = f_vis
            vis = np.zeros(len(feats), dtype=np.uint8)
            vis[vis_idx] = 1
            meshes[yi] = momentum_update(meshes[yi], feats, vis, config.beta)
            epoch_loss += fg_loss + bg_loss
        history.append(epoch_loss / max(len(pairs), 1))
    return TrainResult(params, meshes, bank, history, skipped)


def save_neural_mesh(path, nmesh: NeuralMesh, level: int) -> None:
    """Binary bank (magic, u32 K, u32 d, K*d little-endian f32) plus a JSON
    sidecar carrying the geometry parameters and instance id."""
    feats = np.ascontiguousarray(nmesh.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())
    side = {"level": level, "radius": float(nmesh.mesh.radius),
            "instance_id": nmesh.instance_id}
    Path(str(path) + ".json").write_text(json.dumps(side))


def load_neural_mesh(path) -> tuple[NeuralMesh, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != BANK_MAGIC:
        raise ValueError(f"{path}: not a feature bank checkpoint")
    K, d = struct.unpack_from("<II", raw, 4)
    feats = np.frombuffer(raw, "<f4", K * d, 12).reshape(K, d).copy()
    side = json.loads(Path(str(path) + ".json").read_text())
    mesh = build_geodesic_polyhedron(side["level"], side["radius"])
    if len(mesh.vertices) != K:
        raise ValueError(f"{path}: bank size {K} does not match geometry")
    return NeuralMesh(mesh, feats, side.get("instance_id", "")), side["level"]
