"""End-to-end orchestration: generate, train, merge, infer, eval, report.

A run is driven by one JSON config (schema_version 1) and writes every
artifact under a single output directory:

    dataset/train/inst000/...   image sets (manifest + PNGs)
    dataset/test/...            held-out renders + test manifest
    dataset/_truth/truth.json   hidden ground truth; tests only, the
                                pipeline itself never opens it
    checkpoints/                encoder + per-instance and merged banks
    train_log.json, merge_report.json, predictions.json
    metrics.json, metrics.csv

Held-out test images are rendered clean (no jitter, no artifacts).  When
``dataset.test_instances`` is 0 the test views come from the training
instances themselves at the configured unseen (az, el) pairs; otherwise
from that many extra instances of the same family, which the training
stage never sees.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from . import encoder as enc
from . import neural_mesh as nm
from .canonicalize import MergeConfig, merge_all
from .errors import ConfigError, StageError
from .inference import (align_predictions, compute_metrics, estimate_pose,
                        save_eval_report)
from .raster import Camera
from .so3 import Rotation, ViewSpec, lookat, so3_grid
from .viewgen import (ImageSet, NoiseConfig, SyntheticObject, build_instance,
                      generate_image_set, load_image_set, save_image_set,
                      view_grid, _render_view)

SCHEMA_VERSION = 1

DEFAULT_TEST_SPECS = [
    [22.5, 7.5], [-37.5, -22.5], [52.5, 37.5], [-67.5, 7.5], [97.5, -7.5],
    [127.5, 22.5], [-142.5, -37.5], [172.5, 7.5], [-97.5, 37.5], [7.5, -7.5],
]


def default_config() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "out": "runs/default",
        "camera": {"distance": 12.0, "focal": 2600.0,
                   "image_w": 512, "image_h": 512, "stride": 8},
        "dataset": {
            "family_seed": 0,
            "train_instances": 1,
            "test_instances": 0,
            "level": 2,
            "variation": 0.35,
            "hidden_offsets_deg": None,
            "test_specs": [list(p) for p in DEFAULT_TEST_SPECS],
            "noise": {"pose_sigma": 0.0, "texture_sigma": 0.0,
                      "artifact_rate": 0.0},
        },
        "train": {"d": 64, "level": 2, "epochs": 30, "lr": 0.01,
                  "beta": 0.9, "kappa": 1.0 / 0.07, "rho": 0.1,
                  "tau_r": 0.05, "bank_size": 512, "bg_samples": 128,
                  "views_per_instance": None},
        "merge": {"tau_merge": 0.8, "k_nn": 4, "refine_steps": 5},
        "infer": {"grid": [12, 4, 3], "steps": 50, "step_size": 2.0,
                  "anchor": None},
    }


def _merge_dicts(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge_dicts(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def load_config(path, overrides: dict | None = None) -> dict:
    """Read a config file, fill defaults, validate; raises ConfigError."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, "
                          f"got {raw.get('schema_version')!r}")
    cfg = _merge_dicts(default_config(), raw)
    if overrides:
        cfg = _merge_dicts(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["train_instances"] < 1:
        raise ConfigError("dataset.train_instances must be >= 1")
    if ds["test_instances"] < 0:
        raise ConfigError("dataset.test_instances must be >= 0")
    offs = ds["hidden_offsets_deg"]
    if offs is not None and len(offs) != ds["train_instances"]:
        raise ConfigError("hidden_offsets_deg must list one angle per "
                          "training instance")
    if not ds["test_specs"]:
        raise ConfigError("dataset.test_specs must be non-empty")
    for p in ds["test_specs"]:
        if len(p) != 2:
            raise ConfigError(f"test spec must be [az, el], got {p!r}")
    vpi = cfg["train"]["views_per_instance"]
    if vpi is not None and not 1 <= vpi <= 85:
        raise ConfigError("train.views_per_instance must be in [1, 85]")
    g = cfg["infer"]["grid"]
    if len(g) != 3 or min(g) < 1:
        raise ConfigError("infer.grid must be three positive counts")
    try:
        _camera(cfg)
        _train_config(cfg)
        _merge_config(cfg)
        _noise(cfg)
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def config_digest(cfg: dict) -> str:
    """Digest of the experiment definition; the output location is not
    part of the experiment, so reports from two directories can match."""
    core = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _camera(cfg: dict) -> Camera:
    return Camera(**cfg["camera"])


def _noise(cfg: dict) -> NoiseConfig:
    return NoiseConfig(seed=cfg["seed"], **cfg["dataset"]["noise"])


def _train_config(cfg: dict) -> nm.TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "views_per_instance"}
    return nm.TrainConfig(seed=cfg["seed"], **t)


def _merge_config(cfg: dict) -> MergeConfig:
    return MergeConfig(**cfg["merge"])


def _out(cfg: dict) -> Path:
    return Path(cfg["out"])


def _test_ids(cfg: dict) -> list[tuple[str, int, ViewSpec]]:
    """(image id, family index, view spec) for every held-out render."""
    ds = cfg["dataset"]
    n_train, n_test = ds["train_instances"], ds["test_instances"]
    indices = (list(range(n_train)) if n_test == 0
               else list(range(n_train, n_train + n_test)))
    out = []
    k = 0
    for idx in indices:
        for az, el in ds["test_specs"]:
            out.append((f"test{k:03d}", idx, ViewSpec(float(az), float(el), 0.0)))
            k += 1
    return out


def _build_train_instances(cfg: dict) -> list[SyntheticObject]:
    ds = cfg["dataset"]
    offs = ds["hidden_offsets_deg"]
    objs = []
    for i in range(ds["train_instances"]):
        off = None
        if offs is not None:
            off = Rotation.from_axis_angle([0.0, 1.0, 0.0], np.deg2rad(offs[i]))
        objs.append(build_instance(ds["family_seed"], i, ds["level"],
                                   ds["variation"], off))
    return objs


def _json_dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def cmd_gen(cfg: dict) -> Path:
    """Write the train/test dataset plus the hidden-truth sidecar.

    Deterministic: the same config produces byte-identical trees.
    """
    root = _out(cfg) / "dataset"
    cam = _camera(cfg)
    noise = _noise(cfg)
    grid = view_grid()
    truth: dict = {"offsets": {}, "true_poses": {}, "test_poses": {}}

    for i, obj in enumerate(_build_train_instances(cfg)):
        imgset = generate_image_set(obj, grid, noise, cam)
        save_image_set(imgset, root / "train" / f"inst{i:03d}")
        truth["offsets"][obj.instance_id] = \
            [float(x) for x in obj.canonical_offset.m.reshape(-1)]
        truth["true_poses"][obj.instance_id] = \
            [[float(x) for x in p.m.reshape(-1)] for p in imgset.true_poses]

    ds = cfg["dataset"]
    clean = NoiseConfig(seed=cfg["seed"])
    test_dir = root / "test"
    (test_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for tid, idx, spec in _test_ids(cfg):
        obj = build_instance(ds["family_seed"], idx, ds["level"], ds["variation"])
        pose = lookat(spec)
        img, _ = _render_view(obj, pose, cam, None, clean)
        Image.fromarray(img, "RGB").save(test_dir / "images" / f"{tid}.png")
        entries.append({"id": tid, "instance_id": obj.instance_id,
                        "az": spec.az, "el": spec.el})
        truth["test_poses"][tid] = [float(x) for x in pose.m.reshape(-1)]
    _json_dump(test_dir / "manifest.json", {"images": entries})
    _json_dump(root / "_truth" / "truth.json", truth)
    return root


def _load_train_sets(cfg: dict) -> list[ImageSet]:
    root = _out(cfg) / "dataset" / "train"
    n = cfg["dataset"]["train_instances"]
    sets = []
    for i in range(n):
        d = root / f"inst{i:03d}"
        if not d.is_dir():
            raise StageError("train", f"missing image set {d}; run gen first")
        sets.append(load_image_set(d))
    vpi = cfg["train"]["views_per_instance"]
    if vpi is not None:
        sets = [_subset_views(s, vpi) for s in sets]
    return sets


def _subset_views(imgset: ImageSet, count: int) -> ImageSet:
    """The base view plus count-1 grid views spread evenly over the grid."""
    if count >= len(imgset.views):
        return imgset
    n_grid = len(imgset.views) - 1
    picks = [0]
    if count > 1:
        picks += [1 + int(np.floor(i * n_grid / (count - 1)))
                  for i in range(count - 1)]
        picks = sorted(set(min(p, n_grid) for p in picks))
    views = [imgset.views[p] for p in picks]
    return ImageSet(imgset.instance_id, imgset.camera, views, None)


def cmd_train(cfg: dict) -> Path:
    sets = _load_train_sets(cfg)
    result = nm.train(sets, _train_config(cfg))
    ck = _out(cfg) / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    enc.save_encoder(ck / "encoder.nmen", result.encoder)
    for i, mesh in enumerate(result.meshes):
        nm.save_neural_mesh(ck / f"inst{i:03d}.nmbk", mesh, cfg["train"]["level"])
    _json_dump(_out(cfg) / "train_log.json", {
        "loss_history": result.loss_history,
        "skipped_views": result.skipped_views,
    })
    return ck


def cmd_merge(cfg: dict) -> Path:
    ck = _out(cfg) / "checkpoints"
    n = cfg["dataset"]["train_instances"]
    meshes = []
    for i in range(n):
        p = ck / f"inst{i:03d}.nmbk"
        if not p.is_file():
            raise StageError("merge", f"missing checkpoint {p}; run train first")
        meshes.append(nm.load_neural_mesh(p)[0])
    sets = _load_train_sets(cfg)
    merged, _, report = merge_all(meshes, sets, _merge_config(cfg), cfg["seed"])
    nm.save_neural_mesh(ck / "merged.nmbk", merged, cfg["train"]["level"])
    _json_dump(_out(cfg) / "merge_report.json", report)
    return ck / "merged.nmbk"


def cmd_infer(cfg: dict) -> Path:
    out = _out(cfg)
    ck = out / "checkpoints"
    for req in ("encoder.nmen", "merged.nmbk"):
        if not (ck / req).is_file():
            raise StageError("infer", f"missing checkpoint {ck / req}")
    params = enc.load_encoder(ck / "encoder.nmen")
    mesh, _ = nm.load_neural_mesh(ck / "merged.nmbk")
    cam = _camera(cfg)
    manifest_path = out / "dataset" / "test" / "manifest.json"
    if not manifest_path.is_file():
        raise StageError("infer", f"missing test manifest {manifest_path}")
    entries = json.loads(manifest_path.read_text())["images"]
    icfg = cfg["infer"]
    inits = so3_grid(*icfg["grid"])
    preds = []
    for ent in entries:
        ipath = out / "dataset" / "test" / "images" / f"{ent['id']}.png"
        img = np.asarray(Image.open(ipath).convert("RGB"), dtype=np.float32) / 255.0
        fmap = enc.encode(params, img)
        est = estimate_pose(fmap, mesh, cam, inits,
                            icfg["steps"], icfg["step_size"])
        preds.append({"id": ent["id"],
                      "pose": [float(x) for x in est.pose.m.reshape(-1)],
                      "residual": est.residual,
                      "iterations": est.iterations})
    _json_dump(out / "predictions.json", {"predictions": preds})
    return out / "predictions.json"


def cmd_eval(cfg: dict) -> Path:
    out = _out(cfg)
    ppath = out / "predictions.json"
    if not ppath.is_file():
        raise StageError("eval", f"missing predictions {ppath}; run infer first")
    preds_raw = json.loads(ppath.read_text())["predictions"]
    entries = json.loads(
        (out / "dataset" / "test" / "manifest.json").read_text())["images"]
    gt_by_id = {e["id"]: lookat(ViewSpec(e["az"], e["el"], 0.0)) for e in entries}
    ids = [p["id"] for p in preds_raw]
    preds = [Rotation(np.array(p["pose"]).reshape(3, 3)) for p in preds_raw]
    gts = [gt_by_id[i] for i in ids]

    anchor = cfg["infer"]["anchor"] or ids[0]
    if anchor not in ids:
        raise StageError("eval", f"anchor image '{anchor}' not in predictions")
    ai = ids.index(anchor)
    aligned = align_predictions(preds, preds[ai], gts[ai])
    report = compute_metrics(aligned, gts)
    save_eval_report(out / "metrics.json", out / "metrics.csv", report,
                     ids, aligned, gts, config_digest(cfg))
    return out / "metrics.json"


class _Lock:
    """Exclusive per-output-directory lockfile."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError("run", f"output dir is locked by {self.path}; "
                             "remove it if no other run is active") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def cmd_run(cfg: dict) -> Path:
    """gen (if needed) -> train -> merge -> infer -> eval, under a lock."""
    out = _out(cfg)
    with _Lock(out):
        stages = []
        if not (out / "dataset" / "train").is_dir():
            stages.append(("gen", cmd_gen))
        stages += [("train", cmd_train), ("merge", cmd_merge),
                   ("infer", cmd_infer), ("eval", cmd_eval)]
        for name, fn in stages:
            try:
                fn(cfg)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, str(e)) from e
    return out / "metrics.json"


def cmd_report(report_path, svg_path=None) -> str:
    """Fixed-width metrics table; optionally an SVG error histogram."""
    try:
        blob = json.loads(Path(report_path).read_text())
        per_image = blob["per_image"]
        median, acc30, acc10 = blob["median"], blob["acc30"], blob["acc10"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise StageError("report", f"malformed report {report_path}: {e}") from e
    if not per_image:
        raise StageError("report", "report has an empty per_image list")

    lines = [
        f"{'image':<12} {'error_deg':>10}",
        "-" * 23,
    ]
    for row in per_image:
        lines.append(f"{row['id']:<12} {row['error_deg']:>10.3f}")
    lines.append("-" * 23)
    lines.append(f"{'median':<12} {median:>10.3f}")
    lines.append(f"{'acc30':<12} {acc30:>10.3f}")
    lines.append(f"{'acc10':<12} {acc10:>10.3f}")
    table = "\n".join(lines)
    if svg_path is not None:
        _write_histogram_svg(svg_path, [row["error_deg"] for row in per_image])
    return table


def _write_histogram_svg(path, errors: list[float], n_bins: int = 18) -> None:
    """Standalone SVG bar chart of the error distribution (10-degree bins
    up to 180)."""
    hi = 180.0
    edges = np.linspace(0.0, hi, n_bins + 1)
    counts, _ = np.histogram(np.clip(errors, 0.0, hi), bins=edges)
    w, h, pad = 640, 360, 40
    bar_w = (w - 2 * pad) / n_bins
    peak = max(int(counts.max()), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w // 2}" y="20" text-anchor="middle" font-size="14">'
        f'pose error distribution (n={len(errors)})</text>',
    ]
    for i, c in enumerate(counts):
        bh = (h - 2 * pad) * c / peak
        x = pad + i * bar_w
        parts.append(
            f'<rect x="{x:.1f}" y="{h - pad - bh:.1f}" width="{bar_w - 2:.1f}" '
            f'height="{bh:.1f}" fill="#4878a8"/>')
        if i % 3 == 0:
            parts.append(
                f'<text x="{x:.1f}" y="{h - pad + 14}" font-size="10">'
                f'{edges[i]:.0f}</text>')
    parts.append(f'<text x="{pad}" y="{pad - 8}" font-size="10">count (max {peak})</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
