"""Synthetic multi-distance normal-map scenes, dataset I/O and normal-map metrics."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cameras import NEAR_FLOOR, Camera, cast_cones, load_cameras, save_cameras, sphere_radius
from .shapes import PATCH_DIRECTION, AnalyticShape, make_shape, sphere_trace

log = logging.getLogger(__name__)

FLOAT_IMAGE_MAGIC = b"SNSRFLT1"
DATASET_FORMAT = "snsr-dataset"
DATASET_VERSION = 1
TAGS = ("regular", "closeup")
SPLITS = ("train", "test")


@dataclass
class View:
    camera: Camera
    normals: np.ndarray  # (H, W, 3) float32, world space, unit under the mask
    mask: np.ndarray  # (H, W) bool
    tag: str = "regular"
    split: str = "train"

    @property
    def name(self) -> str:
        return self.camera.name


@dataclass
class SceneDataset:
    views: list[View]
    bound_radius: float = 1.0
    normalization: dict = field(default_factory=lambda: {"scale": 1.0, "offset": [0.0, 0.0, 0.0]})
    shape: dict | None = None  # {"name": ..., "params": {...}} for analytic scenes
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.views:
            raise ValueError("a dataset needs at least one view")

    def select(self, split: str | None = None, tag: str | None = None) -> list[View]:
        return [v for v in self.views if (split is None or v.split == split) and (tag is None or v.tag == tag)]

    def analytic_shape(self) -> AnalyticShape | None:
        if not self.shape:
            return None
        return make_shape(self.shape["name"], **self.shape.get("params", {}))

    def scale_range(self, margin: float = 1.1) -> tuple[float, float]:
        return scale_range([v.camera for v in self.views if v.split == "train"], self.bound_radius, margin)


def scale_range(cameras, bound_radius: float, margin: float = 1.1) -> tuple[float, float]:
    """Smallest and largest inscribed-sphere radius of any pixel cone where it can
    meet the object, i.e. at distances within ``bound_radius`` of the origin."""
    lo, hi = math.inf, 0.0
    for cam in cameras:
        d = float(np.linalg.norm(cam.center))
        near = max(d - bound_radius, NEAR_FLOOR)
        far = d + bound_radius
        rows = np.array([0, cam.height // 2, cam.height - 1])
        cols = np.array([0, cam.width // 2, cam.width - 1])
        _, axes, radii = cast_cones(cam, rows, cols)
        vn = np.linalg.norm(axes, axis=-1)
        for dist in (near, far):
            s = sphere_radius(dist, vn, cam.f_world, radii)
            lo, hi = min(lo, float(s.min())), max(hi, float(s.max()))
    return lo / margin, hi * margin


# ---------------------------------------------------------------------------
# generation


def ring_cameras(n: int, distance: float, fov_deg: float, resolution: int,
                 elevations=(30.0, -30.0), azimuth_offset: float = 0.0, prefix: str = "reg") -> list[Camera]:
    cams = []
    for i in range(n):
        az = math.radians(azimuth_offset + 360.0 * i / n)
        el = math.radians(elevations[i % len(elevations)])
        eye = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, np.zeros(3), width=resolution, height=resolution,
                                   fov_deg=fov_deg, name=f"{prefix}{i:03d}"))
    return cams


def closeup_cameras(n: int, target: np.ndarray, distance: float, fov_deg: float, resolution: int,
                    spread_deg: float = 20.0, phase: float = 0.0, prefix: str = "close") -> list[Camera]:
    """Cameras at ``distance`` from ``target``, tilted around the target's normal."""
    axis = target / np.linalg.norm(target)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    cams = []
    for i in range(n):
        tilt = math.radians(spread_deg) * (0.5 + 0.5 * (i % 2))
        az = 2 * math.pi * (i + phase) / max(n, 1)
        d = math.cos(tilt) * axis + math.sin(tilt) * (math.cos(az) * e1 + math.sin(az) * e2)
        cams.append(Camera.look_at(target + distance * d, target, width=resolution, height=resolution,
                                   fov_deg=fov_deg, name=f"{prefix}{i:03d}"))
    return cams


def render_analytic_view(shape: AnalyticShape, camera: Camera, supersampling: int = 8,
                         max_steps: int = 256, eps: float = 1e-5, chunk: int = 1 << 17):
    """Ground-truth normal map by averaging k x k sub-pixel normals over each pixel.

    A pixel is foreground when at least half of its sub-pixel rays hit. Returns
    (normals (H, W, 3) float32 world space, mask (H, W) bool).
    """
    k = supersampling
    H, W = camera.height, camera.width
    K, R = camera.K, camera.R
    sub = (np.arange(k) + 0.5) / k
    n_pix = H * W
    acc = np.zeros((n_pix, 3))
    hits = np.zeros(n_pix, dtype=np.int64)
    pix_rows, pix_cols = np.divmod(np.arange(n_pix), W)
    pix_per_chunk = max(1, chunk // (k * k))
    origin = torch.as_tensor(camera.center)
    for start in range(0, n_pix, pix_per_chunk):
        pr = pix_rows[start:start + pix_per_chunk]
        pc = pix_cols[start:start + pix_per_chunk]
        u = (pc[:, None, None] + sub[None, None, :]).repeat(k, axis=1)
        v = (pr[:, None, None] + sub[None, :, None]).repeat(k, axis=2)
        local = np.stack([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], np.ones_like(u)], -1)
        dirs = local.reshape(-1, 3) @ R.T
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        d = torch.as_tensor(dirs)
        o = origin.expand_as(d)
        t, hit = sphere_trace(shape, o, d, max_steps=max_steps, eps=eps)
        nrm = torch.zeros_like(d)
        if bool(hit.any()):
            nrm[hit] = shape.normals(o[hit] + t[hit, None] * d[hit])
        nrm = nrm.numpy().reshape(-1, k * k, 3)
        acc[start:start + len(pr)] = nrm.sum(1)
        hits[start:start + len(pr)] = hit.numpy().reshape(-1, k * k).sum(1)
    mask = hits * 2 >= k * k
    length = np.linalg.norm(acc, axis=-1)
    mask &= length > 1e-12
    normals = np.zeros((n_pix, 3))
    normals[mask] = acc[mask] / length[mask, None]
    return normals.reshape(H, W, 3).astype(np.float32), mask.reshape(H, W)


def generate_synthetic_scene(shape: str = "sphere", n_regular: int = 16, n_closeup: int = 0,
                             resolution: int = 128, supersampling: int = 8, *,
                             n_test_regular: int = 0, n_test_closeup: int = 0,
                             regular_distance: float = 3.0, closeup_factor: float = 4.0,
                             shape_params: dict | None = None, max_steps: int = 256) -> SceneDataset:
    """Render a multi-distance normal-map dataset of an analytic shape.

    Regular views sit on a ring around the object; close-up views look at the
    detail patch (or the (1, 1, 1) direction) from ``closeup_factor`` times closer
    to the surface. Test views are interleaved with the training views.
    """
    shape_params = dict(shape_params or {})
    obj = make_shape(shape, **shape_params)
    fov = 2 * math.degrees(math.atan(1.15 * obj.bound_radius / regular_distance))
    views: list[View] = []

    def add(cams, tag, split):
        for cam in cams:
            n, m = render_analytic_view(obj, cam, supersampling, max_steps=max_steps)
            views.append(View(cam, n, m, tag, split))

    add(ring_cameras(n_regular, regular_distance, fov, resolution), "regular", "train")
    if n_test_regular:
        add(ring_cameras(n_test_regular, regular_distance, fov, resolution, elevations=(15.0, -15.0),
                         azimuth_offset=180.0 / max(n_regular, 1), prefix="test_reg"), "regular", "test")
    if n_closeup or n_test_closeup:
        target = obj.patch_center if obj.patch_center is not None else PATCH_DIRECTION * obj.bound_radius
        # distance to the surface shrinks by closeup_factor
        surf_dist = regular_distance - float(np.linalg.norm(target))
        dist = surf_dist / closeup_factor
        add(closeup_cameras(n_closeup, target, dist, fov, resolution), "closeup", "train")
        if n_test_closeup:
            add(closeup_cameras(n_test_closeup, target, dist, fov, resolution, spread_deg=12.0, phase=0.5,
                                prefix="test_close"), "closeup", "test")
    return SceneDataset(
        views=views, bound_radius=obj.bound_radius,
        shape={"name": shape, "params": shape_params},
        meta={"resolution": resolution, "supersampling": supersampling,
              "regular_distance": regular_distance, "closeup_factor": closeup_factor},
    )


# ---------------------------------------------------------------------------
# file formats


def write_float_image(path, image: np.ndarray) -> None:
    """Raw float image: magic, uint32 height/width/channels (LE), float32 row-major."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(FLOAT_IMAGE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_float_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != FLOAT_IMAGE_MAGIC:
        raise ValueError(f"{path}: not a float image (bad magic)")
    h, w, c = struct.unpack("<III", data[8:20])
    if len(data) != 20 + 4 * h * w * c:
        raise ValueError(f"{path}: expected {h}x{w}x{c} floats, file size disagrees")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, c).astype(np.float32)


def write_mask(path, mask: np.ndarray) -> None:
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(m.tobytes())


def read_mask(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM mask")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: masks must be 8-bit")
    pix = np.frombuffer(data[len(data) - w * h:], dtype=np.uint8)
    return pix.reshape(h, w) > 127


def save_dataset(dataset: SceneDataset, path) -> None:
    root = Path(path)
    (root / "normals").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    save_cameras([v.camera for v in dataset.views], root / "cameras.txt")
    entries = []
    for v in dataset.views:
        nfile = f"normals/{v.name}.nrm"
        mfile = f"masks/{v.name}.pgm"
        write_float_image(root / nfile, v.normals)
        write_mask(root / mfile, v.mask)
        entries.append({"name": v.name, "tag": v.tag, "split": v.split, "normal_file": nfile, "mask_file": mfile})
    manifest = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "bound_radius": dataset.bound_radius, "normalization": dataset.normalization,
        "shape": dataset.shape, "meta": dataset.meta, "views": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{root}/manifest.json: malformed ({e})") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root}/manifest.json: not a {DATASET_FORMAT} manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{root}/manifest.json: unsupported version {manifest.get('version')}")
    cams = {c.name: c for c in load_cameras(root / "cameras.txt")}
    views = []
    for entry in manifest.get("views", []):
        name = entry.get("name")
        if name not in cams:
            raise ValueError(f"view {name!r}: no camera record in cameras.txt")
        if entry.get("tag") not in TAGS or entry.get("split") not in SPLITS:
            raise ValueError(f"view {name!r}: bad tag/split {entry.get('tag')!r}/{entry.get('split')!r}")
        cam = cams[name]
        nfile, mfile = root / entry["normal_file"], root / entry["mask_file"]
        if not nfile.exists():
            raise FileNotFoundError(f"view {name!r}: missing normal map {nfile}")
        if not mfile.exists():
            raise FileNotFoundError(f"view {name!r}: missing mask {mfile}")
        normals = read_float_image(nfile)
        mask = read_mask(mfile)
        if normals.shape != (cam.height, cam.width, 3) or mask.shape != (cam.height, cam.width):
            raise ValueError(f"view {name!r}: image shapes {normals.shape}/{mask.shape} do not match "
                             f"camera {cam.height}x{cam.width}")
        views.append(View(cam, normals, mask, entry["tag"], entry["split"]))
    return SceneDataset(views=views, bound_radius=float(manifest["bound_radius"]),
                        normalization=manifest.get("normalization") or {"scale": 1.0, "offset": [0.0] * 3},
                        shape=manifest.get("shape"), meta=manifest.get("meta") or {})


# ---------------------------------------------------------------------------
# metrics


def mean_angular_error(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean angle in degrees between normal maps over the masked pixels."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        sel = np.asarray(mask).reshape(-1).astype(bool)
        pred, truth = pred[sel], truth[sel]
    if pred.shape[0] == 0:
        raise ValueError("mean angular error over an empty mask")
    pn = pred / np.maximum(np.linalg.norm(pred, axis=-1, keepdims=True), 1e-30)
    tn = truth / np.maximum(np.linalg.norm(truth, axis=-1, keepdims=True), 1e-30)
    cos = np.clip((pn * tn).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())
