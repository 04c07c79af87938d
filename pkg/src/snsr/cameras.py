"""Pinhole cameras, pixel cones and inscribed-sphere sampling.

Every pixel is treated as a cone from the camera center through the pixel's
disc on the image plane. Points sampled along the cone carry the radius of the
sphere inscribed in the cone at that depth; that radius is the scale fed to
the field.

Conventions: OpenCV camera axes (x right, y down, z forward), extrinsics are
world-from-camera, pixel (row, col) has its center at continuous image
coordinates (col + 0.5, row + 0.5). Image-plane geometry is expressed in world
units: the plane sits at distance ``f_world = fx * dx`` from the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

CAMERA_FILE_MAGIC = "# snsr-cameras v1"
NEAR_FLOOR = 0.05


@dataclass
class Camera:
    K: np.ndarray  # 3x3 intrinsics, pixels
    R: np.ndarray  # 3x3 world-from-camera rotation
    center: np.ndarray  # camera center, world units
    width: int
    height: int
    dx: float  # pixel width on the image plane, world units
    dy: float
    name: str = ""

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.dx = float(self.dx)
        self.dy = float(self.dy)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError(f"camera {self.name!r}: focal length must be positive")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError(f"camera {self.name!r}: pixel pitch must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.name!r}: image size must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError(f"camera {self.name!r}: rotation is not orthonormal")
        # The image plane must be the same plane for both axes.
        if not math.isclose(self.K[0, 0] * self.dx, self.K[1, 1] * self.dy, rel_tol=1e-6):
            raise ValueError(f"camera {self.name!r}: fx*dx and fy*dy disagree")

    @property
    def focal(self) -> float:
        return float(self.K[0, 0])

    @property
    def f_world(self) -> float:
        """Focal distance in world units (distance to the image plane)."""
        return self.focal * self.dx

    @property
    def disc_radius(self) -> float:
        return disc_radius(self.dx, self.dy)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
                fov_deg: float, f_world: float = 1.0, name: str = "") -> "Camera":
        """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(up, forward)) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        K = np.array([[fx, 0, width / 2], [0, fx, height / 2], [0, 0, 1]])
        pitch = f_world / fx
        return cls(K=K, R=R, center=eye, width=width, height=height, dx=pitch, dy=pitch, name=name)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> continuous pixel coordinates (..., 2) as (u, v)."""
        cam = (np.asarray(points, dtype=np.float64) - self.center) @ self.R
        uv = cam[..., :2] / cam[..., 2:3]
        return uv * np.array([self.K[0, 0], self.K[1, 1]]) + self.K[:2, 2]


@dataclass(frozen=True)
class Cone:
    origin: np.ndarray
    axis: np.ndarray  # center -> pixel disc center on the image plane, not normalized
    radius: float  # disc radius on the image plane
    f_world: float


@dataclass(frozen=True)
class ConeSample:
    t: float
    p: np.ndarray
    s: float


def disc_radius(dx, dy):
    """Radius of the disc with the same area as a dx-by-dy pixel."""
    return (dx * dy / math.pi) ** 0.5


def cast_cone(camera: Camera, row: int, col: int) -> Cone:
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise IndexError(f"pixel ({row}, {col}) outside {camera.height}x{camera.width} image")
    origins, axes, radii = cast_cones(camera, np.array([row]), np.array([col]))
    return Cone(origin=origins[0], axis=axes[0], radius=float(radii[0]), f_world=camera.f_world)


def cast_cones(camera: Camera, rows: np.ndarray, cols: np.ndarray):
    """Vectorized cast_cone. Returns (origins, axes, radii) as float64 arrays."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    f_world = camera.f_world
    local = np.stack(
        [
            (cols + 0.5 - cx) / fx * f_world,
            (rows + 0.5 - cy) / fy * f_world,
            np.full(rows.shape, f_world),
        ],
        axis=-1,
    )
    axes = local @ camera.R.T
    origins = np.broadcast_to(camera.center, axes.shape).copy()
    radii = np.full(rows.shape, camera.disc_radius)
    return origins, axes, radii


def sphere_radius(dist, axis_norm, f_world, r_dot):
    """Radius of the sphere inscribed in a pixel cone at distance ``dist`` from the apex.

    Works on floats, numpy arrays and torch tensors alike.
    """
    lateral_sq = axis_norm**2 - f_world**2
    if isinstance(lateral_sq, torch.Tensor):
        if bool((lateral_sq < -1e-9 * f_world**2).any()):
            raise ValueError("cone axis shorter than the focal distance")
        lateral = lateral_sq.clamp_min(0.0).sqrt()
        denom = axis_norm * ((lateral - r_dot) ** 2 + f_world**2).sqrt()
    else:
        if np.any(np.asarray(lateral_sq) < -1e-9 * f_world**2):
            raise ValueError("cone axis shorter than the focal distance")
        lateral = np.sqrt(np.maximum(lateral_sq, 0.0))
        denom = axis_norm * np.sqrt((lateral - r_dot) ** 2 + f_world**2)
    return dist * f_world * r_dot / denom


def cone_sphere_radius(cone: Cone, t: float) -> float:
    if t < 0:
        raise ValueError("ray parameter must be non-negative")
    vn = float(np.linalg.norm(cone.axis))
    return float(sphere_radius(t * vn, vn, cone.f_world, cone.radius))


def stratified_t(near, far, n_samples: int, generator: torch.Generator | None = None,
                 jitter: bool = True):
    """Jittered-uniform ray parameters, one stratum per sample.

    ``near``/``far`` are (N,) tensors; returns (N, n_samples) sorted ascending.
    """
    n = near.shape[0]
    if jitter:
        u = torch.rand((n, n_samples), generator=generator, dtype=near.dtype)
    else:
        u = torch.full((n, n_samples), 0.5, dtype=near.dtype)
    k = torch.arange(n_samples, dtype=near.dtype)
    return near[:, None] + (far - near)[:, None] * (k + u) / n_samples


def sample_cone(cone: Cone, near: float, far: float, n_samples: int,
                generator: torch.Generator | None = None) -> list[ConeSample]:
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    t = stratified_t(torch.tensor([near], dtype=torch.float64),
                     torch.tensor([far], dtype=torch.float64), n_samples, generator)[0].numpy()
    vn = float(np.linalg.norm(cone.axis))
    s = sphere_radius(t * vn, vn, cone.f_world, cone.radius)
    return [ConeSample(t=float(ti), p=cone.origin + ti * cone.axis, s=float(si))
            for ti, si in zip(t, s)]


def box_intersect(origins, axes, lo=-1.0, hi=1.0):
    """Slab test of o + t*v against an axis-aligned cube.

    Returns (near, far, hit); near is floored at ``NEAR_FLOOR``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / axes
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=-1)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=-1)
    near = np.maximum(tmin, NEAR_FLOOR)
    hit = tmax > near
    return near, tmax, hit


@dataclass
class RayTable:
    """All pixel cones of a set of views, flattened, as torch tensors."""

    origins: torch.Tensor  # (R, 3)
    axes: torch.Tensor  # (R, 3)
    radii: torch.Tensor  # (R,)
    f_world: torch.Tensor  # (R,)
    near: torch.Tensor
    far: torch.Tensor
    normals: torch.Tensor | None = None  # (R, 3) world-space ground truth
    masks: torch.Tensor | None = None  # (R,)
    view: torch.Tensor | None = None  # (R,) view index
    pixel: torch.Tensor | None = None  # (R,) flat pixel index within the view
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "RayTable":
        def pick(x):
            return None if x is None else x[idx]

        return RayTable(
            origins=self.origins[idx], axes=self.axes[idx], radii=self.radii[idx],
            f_world=self.f_world[idx], near=self.near[idx], far=self.far[idx],
            normals=pick(self.normals), masks=pick(self.masks), view=pick(self.view),
            pixel=pick(self.pixel),
        )


def ray_table(cameras: Sequence[Camera], normals=None, masks=None, dtype=torch.float32,
              keep_misses: bool = False) -> RayTable:
    """Cones for every pixel of ``cameras``; rays missing the [-1, 1]^3 domain are dropped
    unless ``keep_misses`` (then their near/far collapse to a tiny interval)."""
    parts = {k: [] for k in ("o", "v", "r", "f", "near", "far", "n", "m", "view", "pix")}
    for i, cam in enumerate(cameras):
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        rows, cols = rows.ravel(), cols.ravel()
        o, v, r = cast_cones(cam, rows, cols)
        near, far, hit = box_intersect(o, v)
        pix = np.arange(rows.size)
        if keep_misses:
            far = np.where(hit, far, near + 1e-3)
            keep = np.ones_like(hit)
        else:
            keep = hit
        parts["o"].append(o[keep])
        parts["v"].append(v[keep])
        parts["r"].append(r[keep])
        parts["f"].append(np.full(keep.sum(), cam.f_world))
        parts["near"].append(near[keep])
        parts["far"].append(far[keep])
        parts["view"].append(np.full(keep.sum(), i))
        parts["pix"].append(pix[keep])
        if normals is not None:
            parts["n"].append(np.asarray(normals[i]).reshape(-1, 3)[keep])
        if masks is not None:
            parts["m"].append(np.asarray(masks[i]).reshape(-1)[keep])

    def cat(key, dt=dtype):
        return torch.as_tensor(np.concatenate(parts[key]), dtype=dt)

    return RayTable(
        origins=cat("o"), axes=cat("v"), radii=cat("r"), f_world=cat("f"),
        near=cat("near"), far=cat("far"),
        normals=cat("n") if normals is not None else None,
        masks=cat("m") if masks is not None else None,
        view=cat("view", torch.int64), pixel=cat("pix", torch.int64),
    )


def sample_rays(rays: RayTable, n_samples: int, generator: torch.Generator | None = None,
                jitter: bool = True):
    """Inscribed-sphere samples along every cone of ``rays``.

    Returns (t, points, scales) with shapes (N, M), (N, M, 3), (N, M).
    """
    t = stratified_t(rays.near, rays.far, n_samples, generator, jitter)
    points = rays.origins[:, None, :] + t[..., None] * rays.axes[:, None, :]
    vn = rays.axes.norm(dim=-1, keepdim=True)
    scales = sphere_radius(t * vn, vn, rays.f_world[:, None], rays.radii[:, None])
    return t, points, scales


def save_cameras(cameras: Sequence[Camera], path) -> None:
    """Write cameras as one whitespace-separated line per view.

    Record: name width height dx dy K(9, row-major) E(12, row-major [R | center]).
    """
    lines = [CAMERA_FILE_MAGIC]
    for cam in cameras:
        ext = np.concatenate([cam.R, cam.center[:, None]], axis=1)
        nums = [repr(float(x)) for x in (cam.dx, cam.dy, *cam.K.ravel(), *ext.ravel())]
        lines.append(" ".join([cam.name or "-", str(cam.width), str(cam.height), *nums]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or text[0].strip() != CAMERA_FILE_MAGIC:
        raise ValueError(f"{path}: missing camera file header {CAMERA_FILE_MAGIC!r}")
    cams = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 26:
            raise ValueError(f"{path}:{lineno}: expected 26 fields, got {len(tok)}")
        vals = [float(x) for x in tok[3:]]
        ext = np.array(vals[11:23]).reshape(3, 4)
        cams.append(Camera(K=np.array(vals[2:11]), R=ext[:, :3], center=ext[:, 3],
                           width=int(tok[1]), height=int(tok[2]), dx=vals[0], dy=vals[1],
                           name="" if tok[0] == "-" else tok[0]))
    return cams
