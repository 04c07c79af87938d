"""Mesh extraction with per-unit scale selection, mesh I/O and Chamfer distance.

Scale selection reads the trained scale-triplane: each unit of the extraction
grid takes the scale bin whose channel-summed plane response, accumulated over
all of the unit's grid vertices and the three planes, is largest. The SDF is
then sampled on the grid with every vertex at its unit's scale and polygonized
with marching cubes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

log = logging.getLogger(__name__)

WELD_TOL = 1e-7


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    vertex_scale: np.ndarray | None = None  # (V,) float32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertex_scale is not None:
            self.vertex_scale = np.asarray(self.vertex_scale, dtype=np.float32).reshape(-1)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def edge_use_counts(self) -> np.ndarray:
        """Number of faces sharing each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts


@dataclass
class ScaleAssignment:
    resolution: tuple[int, int, int]  # grid vertices per axis
    unit_size: int  # grid vertices per unit per axis
    index: np.ndarray  # (Ux, Uy, Uz) selected scale bin
    scales: np.ndarray  # (Ux, Uy, Uz) selected scale value

    def vertex_units(self, axis: int) -> np.ndarray:
        return np.arange(self.resolution[axis]) // self.unit_size

    def vertex_scales(self) -> np.ndarray:
        """Per grid vertex scale, shape ``resolution``."""
        ux, uy, uz = (self.vertex_units(a) for a in range(3))
        return self.scales[np.ix_(ux, uy, uz)]


def _grid_axes(resolution, lo, hi):
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,))
    return [np.linspace(lo[a], hi[a], int(res[a])) for a in range(3)], tuple(int(r) for r in res)


def unit_scale_response(triplane, vertices: np.ndarray) -> np.ndarray:
    """Scale-bin responses of one unit, summed over its vertices and the three planes.

    Each plane lookup is reduced to a scalar by summing its feature channels.
    """
    v = torch.as_tensor(np.asarray(vertices, dtype=np.float64).reshape(-1, 3))
    with torch.no_grad():
        total = sum(triplane.axis_response(v[:, a], a).sum(0) for a in range(3))
    return total.double().numpy()


def argmax_coarsest(response: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the highest (coarsest) bin."""
    n = response.shape[-1]
    return n - 1 - np.argmax(response[..., ::-1], axis=-1)


def select_scales(triplane, resolution=512, unit_size: int = 64, lo=-1.0, hi=1.0) -> ScaleAssignment:
    """Per-unit scale for a grid of ``resolution`` vertices per axis over [lo, hi].

    The response is separable: a unit's sum over its vertices of the x-plane
    term equals (sum over its x coordinates) times (its vertex count in y and z),
    so every unit is scored from three per-axis tables.
    """
    if unit_size < 1:
        raise ValueError("unit size must be positive")
    axes, res = _grid_axes(resolution, lo, hi)
    per_axis, counts = [], []
    with torch.no_grad():
        for a in range(3):
            r = triplane.axis_response(torch.as_tensor(axes[a]), a).double().numpy()  # (R, S)
            units = np.arange(res[a]) // unit_size
            n_units = int(units[-1]) + 1
            acc = np.zeros((n_units, r.shape[1]))
            np.add.at(acc, units, r)
            per_axis.append(acc)
            counts.append(np.bincount(units, minlength=n_units).astype(np.float64))
    sx, sy, sz = per_axis
    cx, cy, cz = counts
    response = (sx[:, None, None, :] * (cy[None, :, None] * cz[None, None, :])[..., None]
                + sy[None, :, None, :] * (cx[:, None, None] * cz[None, None, :])[..., None]
                + sz[None, None, :, :] * (cx[:, None, None] * cy[None, :, None])[..., None])
    index = argmax_coarsest(response)
    bins = triplane.scale_bins().numpy()
    return ScaleAssignment(res, unit_size, index, bins[index])


def constant_assignment(triplane, resolution, unit_size: int, scale: float) -> ScaleAssignment:
    res = tuple(int(r) for r in np.broadcast_to(np.asarray(resolution), (3,)))
    shape = tuple(-(-r // unit_size) for r in res)
    bins = triplane.scale_bins().numpy()
    idx = int(np.argmin(np.abs(np.log(bins) - np.log(scale))))
    return ScaleAssignment(res, unit_size, np.full(shape, idx), np.full(shape, float(scale)))


@torch.no_grad()
def evaluate_grid(sdf_fn, resolution, lo=-1.0, hi=1.0, scales=None, chunk: int = 1 << 16) -> np.ndarray:
    """Sample ``sdf_fn(points, scales)`` on a vertex grid; ``scales`` is a scalar or a grid-shaped array."""
    axes, res = _grid_axes(resolution, lo, hi)
    out = np.empty(res, dtype=np.float64)
    if scales is None:
        scales = 1.0
    scale_grid = np.broadcast_to(np.asarray(scales, dtype=np.float64), res)
    yz = np.stack(np.meshgrid(axes[1], axes[2], indexing="ij"), -1).reshape(-1, 3 - 1)
    rows_per = max(1, chunk // len(yz))
    for i0 in range(0, res[0], rows_per):
        xs = axes[0][i0:i0 + rows_per]
        pts = np.concatenate([np.repeat(xs, len(yz))[:, None], np.tile(yz, (len(xs), 1))], 1)
        s = np.array(scale_grid[i0:i0 + rows_per]).reshape(-1)
        vals = sdf_fn(torch.as_tensor(pts), torch.as_tensor(s))
        out[i0:i0 + rows_per] = np.asarray(vals, dtype=np.float64).reshape(len(xs), res[1], res[2])
    return out


def field_sdf_fn(field):
    dtype = next(field.parameters()).dtype

    def fn(points, scales):
        return field.sdf(points.to(dtype), scales.to(dtype)).double().numpy()

    return fn


def clean_mesh(vertices: np.ndarray, faces: np.ndarray, vertex_scale=None, tol: float = WELD_TOL) -> Mesh:
    """Weld vertices closer than ``tol``, drop degenerate faces and unused vertices."""
    if len(faces) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                    None if vertex_scale is None else np.zeros(0, np.float32))
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    faces = inverse[faces]
    verts = vertices[first]
    vs = None if vertex_scale is None else np.asarray(vertex_scale)[first]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    faces = faces[area > tol * tol]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(verts[used], remap[faces], None if vs is None else vs[used])


def marching_cubes(values: np.ndarray, lo=-1.0, hi=1.0, assignment: ScaleAssignment | None = None) -> Mesh:
    """Zero level set of a vertex grid; faces wind so normals point toward increasing values."""
    res = values.shape
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,))
    spacing = (hi - lo) / (np.asarray(res) - 1)
    if not (values.min() < 0 < values.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                    None if assignment is None else np.zeros(0, np.float32))
    verts, faces, _, _ = measure.marching_cubes(values, 0.0, spacing=tuple(spacing))
    vscale = None
    if assignment is not None:
        # a vertex on a grid edge belongs to the unit of the edge's lower end
        cell = np.clip(np.floor(verts / spacing + 1e-9).astype(np.int64), 0, np.asarray(res) - 1)
        u = cell // assignment.unit_size
        vscale = assignment.scales[u[:, 0], u[:, 1], u[:, 2]]
    return clean_mesh(verts + lo, faces, vscale)


def extract_mesh(field, resolution=512, unit_size: int = 64, mode: str = "smem", scale: float | None = None,
                 lo=-1.0, hi=1.0, chunk: int = 1 << 16):
    """Mesh of the field's zero level set. Returns (mesh, assignment).

    ``mode="smem"`` picks a scale per unit from the triplane; ``mode="constant"``
    evaluates every vertex at ``scale``.
    """
    if mode == "smem":
        assignment = select_scales(field.triplane, resolution, unit_size, lo, hi)
    elif mode == "constant":
        if scale is None:
            raise ValueError("constant-scale extraction needs a scale")
        assignment = constant_assignment(field.triplane, resolution, unit_size, scale)
    else:
        raise ValueError(f"unknown extraction mode {mode!r}")
    values = evaluate_grid(field_sdf_fn(field), resolution, lo, hi, assignment.vertex_scales(), chunk)
    return marching_cubes(values, lo, hi, assignment), assignment


# ---------------------------------------------------------------------------
# I/O


def save_obj(mesh: Mesh, path) -> None:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    except OSError as e:
        raise OSError(f"cannot write mesh to {path}: {e}") from e


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in tok[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def scale_colors(scales: np.ndarray, s_min: float | None = None, s_max: float | None = None) -> np.ndarray:
    """Map scales to RGB: purple for the finest, pale yellow for the coarsest (log ramp)."""
    s = np.asarray(scales, dtype=np.float64)
    lo = np.log(s_min if s_min is not None else s.min())
    hi = np.log(s_max if s_max is not None else s.max())
    t = np.zeros_like(s) if hi <= lo else np.clip((np.log(s) - lo) / (hi - lo), 0, 1)
    fine = np.array([120.0, 40.0, 200.0])
    coarse = np.array([235.0, 225.0, 170.0])
    return np.round(fine + t[:, None] * (coarse - fine)).astype(np.uint8)


def save_ply(mesh: Mesh, path, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with double xyz, optional float ``scale`` and uchar RGB."""
    path = Path(path)
    props = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
              "property double x", "property double y", "property double z"]
    if mesh.vertex_scale is not None:
        props.append(("scale", "<f4"))
        header.append("property float scale")
    if colors is not None:
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    vert = np.empty(len(mesh.vertices), dtype=props)
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    if mesh.vertex_scale is not None:
        vert["scale"] = mesh.vertex_scale
    if colors is not None:
        vert["red"], vert["green"], vert["blue"] = np.asarray(colors, dtype=np.uint8).T
    face = np.empty(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    face["n"] = 3
    face["i"] = mesh.faces
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vert.tobytes())
            fh.write(face.tobytes())
    except OSError as e:
        raise OSError(f"cannot write mesh to {path}: {e}") from e


_PLY_TYPES = {"double": "<f8", "float": "<f4", "float32": "<f4", "float64": "<f8", "uchar": "u1",
              "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4"}


def load_ply(path) -> Mesh:
    """Reader for the binary little-endian triangle PLY files written by :func:`save_ply`."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    elements, current = [], None
    for line in lines[2:]:
        tok = line.split()
        if tok[0] == "element":
            current = {"name": tok[1], "count": int(tok[2]), "props": []}
            elements.append(current)
        elif tok[0] == "property":
            current["props"].append(tok[1:])
    offset = end
    verts = faces = vscale = None
    for el in elements:
        if el["name"] == "vertex":
            dt = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in el["props"]])
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
            verts = np.stack([arr["x"], arr["y"], arr["z"]], 1).astype(np.float64)
            if "scale" in dt.names:
                vscale = arr["scale"].astype(np.float32)
        elif el["name"] == "face":
            dt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=offset)
            if el["count"] and not (arr["n"] == 3).all():
                raise ValueError(f"{path}: only triangle faces are supported")
            offset += dt.itemsize * el["count"]
            faces = arr["i"].astype(np.int64)
    return Mesh(verts, faces if faces is not None else np.zeros((0, 3), np.int64), vscale)


def save_mesh(mesh: Mesh, path, fmt: str | None = None, colors=None) -> None:
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    if fmt == "obj":
        save_obj(mesh, path)
    elif fmt == "ply":
        save_ply(mesh, path, colors)
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")


def load_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise ValueError(f"unsupported mesh format {suffix!r}")


# ---------------------------------------------------------------------------
# Chamfer distance


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh area."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    face = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    return (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: the average of the two mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def chamfer_between(a, b, samples: int = 100_000, seed: int = 0, region=None) -> float:
    """Chamfer distance between meshes and/or point sets (meshes are area-sampled).

    Both meshes are sampled from the same random stream, so identical meshes
    give exactly zero and comparisons between similar meshes have less noise.
    ``region`` optionally maps (N, 3) points to a boolean mask; only samples
    inside it on both sides are compared.
    """
    pa = sample_surface(a, samples, seed) if isinstance(a, Mesh) else np.asarray(a, dtype=np.float64)
    pb = sample_surface(b, samples, seed) if isinstance(b, Mesh) else np.asarray(b, dtype=np.float64)
    if region is not None:
        pa, pb = pa[np.asarray(region(pa), dtype=bool)], pb[np.asarray(region(pb), dtype=bool)]
    return chamfer_points(pa, pb)
