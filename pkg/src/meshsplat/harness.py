"""Synthetic scenes, Chamfer evaluation and ablation sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .appearance import color_to_raw, vertex_color
from .geometry import (Camera, Image, Mesh, box_mesh, icosphere, load_cameras, load_obj,
                       look_at, read_ppm, save_cameras, save_obj, torus_mesh, write_ppm)
from .splat import render_first_hit
from .train import TrainConfig, train_loop

log = logging.getLogger(__name__)

SHAPES = ("sphere", "torus", "cube", "blob")
GT_SAMPLES = 20000
CHAMFER_HEADER = ("# chamfer = 0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|), "
                  "Euclidean distances, same units as the mesh")


@dataclass
class Dataset:
    views: list            # (rgb Image, mask Image, Camera)
    gt_mesh: Mesh
    gt_points: np.ndarray
    meta: dict

    @property
    def bbox_diagonal(self) -> float:
        v = self.gt_mesh.vertices
        return float(np.linalg.norm(v.max(0) - v.min(0)))

    @property
    def cameras(self) -> list[Camera]:
        return [c for _, _, c in self.views]


# ------------------------------------------------------------------ shapes

def _blob(seed: int, radius: float = 0.6, subdivisions: int = 4) -> Mesh:
    """Icosphere with a few low-frequency radial bumps drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    base = icosphere(subdivisions)
    u = base.vertices
    k = 4
    dirs = rng.normal(size=(k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freq = rng.uniform(1.5, 3.0, k)
    phase = rng.uniform(0, 2 * np.pi, k)
    amp = rng.uniform(0.04, 0.08, k)
    r = 1.0 + (amp * np.sin((u @ dirs.T) * freq + phase)).sum(1)
    return Mesh(radius * r[:, None] * u, base.faces)


def make_shape(shape: str, seed: int = 0) -> Mesh:
    if shape == "sphere":
        return icosphere(4, radius=0.6)
    if shape == "torus":
        return torus_mesh(0.55, 0.22, 64, 24)
    if shape == "cube":
        return box_mesh(0.45, subdivisions=12)
    if shape == "blob":
        return _blob(seed)
    raise ValueError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")


def procedural_colors(vertices: np.ndarray) -> np.ndarray:
    """Smooth position-dependent RGB in [0.15, 0.85]."""
    p = vertices
    return np.stack([0.5 + 0.35 * np.sin(3.0 * p[:, 0] + 1.0),
                     0.5 + 0.35 * np.sin(3.0 * p[:, 1] + 2.0),
                     0.5 + 0.35 * np.sin(3.0 * p[:, 2] + 3.0)], axis=1)


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def orbit_cameras(center, radius: float, n: int, resolution: int, fov_deg: float = 55.0):
    eyes = np.asarray(center) + 2.5 * radius * fibonacci_directions(n)
    return [look_at(e, center, fov_deg=fov_deg, resolution=(resolution, resolution))
            for e in eyes]


def make_dataset(shape: str, n_views: int, resolution: int, seed: int, *,
                 albedo=None) -> Dataset:
    """Render opaque ground-truth views of an analytic shape.

    ``albedo`` (RGB) replaces the procedural color pattern with a constant.
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    gt = make_shape(shape, seed)
    if albedo is None:
        cols = procedural_colors(gt.vertices)
    else:
        cols = np.broadcast_to(np.asarray(albedo, float), gt.vertices.shape).copy()
    gt = Mesh(gt.vertices, gt.faces, color_to_raw(cols))
    center = 0.5 * (gt.vertices.max(0) + gt.vertices.min(0))
    radius = float(np.linalg.norm(gt.vertices - center, axis=1).max())
    views = []
    for cam in orbit_cameras(center, radius, n_views, resolution):
        rgb, mask = render_first_hit(gt.vertices, gt.faces, cols, cam)
        views.append((Image(rgb), Image(mask), cam))
    meta = {"shape": shape, "views": n_views, "resolution": resolution, "seed": seed,
            "radius": repr(radius),
            "albedo": "procedural" if albedo is None else " ".join(map(repr, map(float, albedo)))}
    return Dataset(views, gt, sample_surface(gt, GT_SAMPLES, seed), meta)


# --------------------------------------------------------------------- IO

def save_dataset(ds: Dataset, root) -> None:
    """Write ``cameras.txt``, ``view_%03d.ppm``, ``mask_%03d.ppm``, ``gt.obj``, ``meta.txt``.

    PPMs carry float sidecars so reloaded images are exact to float32.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_cameras(ds.cameras, root / "cameras.txt")
    for i, (rgb, mask, _) in enumerate(ds.views):
        write_ppm(root / f"view_{i:03d}.ppm", rgb, sidecar=True)
        write_ppm(root / f"mask_{i:03d}.ppm", mask, sidecar=True)
    save_obj(ds.gt_mesh, root / "gt.obj")
    (root / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in ds.meta.items()))


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def load_dataset(root) -> Dataset:
    root = Path(root)
    cams = load_cameras(root / "cameras.txt")
    views = []
    for i, cam in enumerate(cams):
        rgb = read_ppm(root / f"view_{i:03d}.ppm", 3)
        mask = read_ppm(root / f"mask_{i:03d}.ppm", 1)
        views.append((rgb, mask, cam))
    gt = load_obj(root / "gt.obj")
    meta = read_meta(root / "meta.txt")
    seed = int(meta.get("seed", 0))
    return Dataset(views, gt, sample_surface(gt, GT_SAMPLES, seed), meta)


# ---------------------------------------------------------------- sampling

def sample_surface(mesh: Mesh, n: int, seed=None) -> np.ndarray:
    """Area-weighted uniform samples on the surface, ``(n, 3)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    area = mesh.face_areas() if mesh.n_faces else np.zeros(0)
    total = area.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    f = rng.choice(len(area), size=n, p=area / total)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[f]]
    return np.einsum("nk,nkc->nc", w, tri)


# ----------------------------------------------------------------- chamfer

@nb.njit(cache=True)
def _pair_dist(q, p):
    dx = q[0] - p[0]
    dy = q[1] - p[1]
    dz = q[2] - p[2]
    return math.sqrt(dx * dx + dy * dy + dz * dz)


@nb.njit(cache=True)
def _nn_brute(queries, points, out):
    for i in range(len(queries)):
        best = np.inf
        for j in range(len(points)):
            d = _pair_dist(queries[i], points[j])
            if d < best:
                best = d
        out[i] = best


@nb.njit(cache=True)
def _nn_grid(queries, points, order, start, lo, h, dims, out):
    nx, ny, nz = dims[0], dims[1], dims[2]
    rmax = max(nx, max(ny, nz)) + 1
    for i in range(len(queries)):
        q = queries[i]
        cx = int(math.floor((q[0] - lo[0]) / h))
        cy = int(math.floor((q[1] - lo[1]) / h))
        cz = int(math.floor((q[2] - lo[2]) / h))
        # shells must reach the grid even for far-away queries
        r0 = max(0, max(-cx, cx - nx + 1), max(max(-cy, cy - ny + 1), max(-cz, cz - nz + 1)))
        best = np.inf
        r = r0
        while True:
            for x in range(max(cx - r, 0), min(cx + r, nx - 1) + 1):
                for y in range(max(cy - r, 0), min(cy + r, ny - 1) + 1):
                    for z in range(max(cz - r, 0), min(cz + r, nz - 1) + 1):
                        if max(abs(x - cx), max(abs(y - cy), abs(z - cz))) != r:
                            continue
                        c = (x * ny + y) * nz + z
                        for k in range(start[c], start[c + 1]):
                            d = _pair_dist(q, points[order[k]])
                            if d < best:
                                best = d
            # everything outside the searched cube is farther than r*h
            # (minus slack for the floor() above)
            if best <= (r - 1e-6) * h:
                break
            if r > rmax + r0:
                break
            r += 1
        out[i] = best


class PointGrid:
    """Uniform grid over a point set for exact nearest-neighbor distances."""

    def __init__(self, points, per_cell: float = 2.0):
        p = np.ascontiguousarray(points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
            raise ValueError("need a non-empty (n, 3) point set")
        self.points = p
        lo, hi = p.min(0), p.max(0)
        ext = np.maximum(hi - lo, 1e-12)
        h = float((np.prod(ext) * per_cell / len(p)) ** (1 / 3))
        # at most 257 cells per axis, also for flat or collinear sets
        h = max(h, float(ext.max()) / 256)
        dims = np.floor(ext / h).astype(np.int64) + 1
        idx = np.minimum(np.floor((p - lo) / h).astype(np.int64), dims - 1)
        cell = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        self.order = np.argsort(cell, kind="stable")
        counts = np.bincount(cell, minlength=int(np.prod(dims)))
        self.start = np.concatenate([[0], np.cumsum(counts)])
        self.lo, self.h, self.dims = lo, h, dims

    def query(self, queries) -> np.ndarray:
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(q))
        _nn_grid(q, self.points, self.order, self.start, self.lo, self.h, self.dims, out)
        return out


def nearest_distances(queries, points) -> np.ndarray:
    return PointGrid(points).query(queries)


def nearest_distances_brute(queries, points) -> np.ndarray:
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(q))
    _nn_brute(q, p, out)
    return out


def _check_points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or len(a) == 0:
        raise ValueError(f"{name} must be a non-empty (n, 3) point set")
    return a


def chamfer(points_a, points_b) -> float:
    """Halved symmetric mean nearest-neighbor Euclidean distance."""
    a, b = _check_points(points_a, "points_a"), _check_points(points_b, "points_b")
    da = nearest_distances(a, b)
    db = nearest_distances(b, a)
    # summing the two halves in a fixed order keeps chamfer(a,b) == chamfer(b,a)
    ma, mb = float(da.mean()), float(db.mean())
    return 0.5 * (min(ma, mb) + max(ma, mb))


def chamfer_brute(points_a, points_b) -> float:
    a, b = _check_points(points_a, "points_a"), _check_points(points_b, "points_b")
    ma = float(nearest_distances_brute(a, b).mean())
    mb = float(nearest_distances_brute(b, a).mean())
    return 0.5 * (min(ma, mb) + max(ma, mb))


def mesh_chamfer(pred: Mesh, gt, n: int = 100000, seed: int = 0) -> float:
    """Chamfer between ``n`` surface samples of ``pred`` and ``gt`` (mesh or points)."""
    pa = sample_surface(pred, n, seed)
    pb = gt if isinstance(gt, np.ndarray) else sample_surface(gt, n, seed + 1)
    return chamfer(pa, pb)


# ---------------------------------------------------------------- ablation

SUITES = {
    "layers": [("N=1", {"layers": 1, "soft_layers": False}),
               ("N=3", {"layers": 3}),
               ("N=5", {"layers": 5})],
    "dmtet_res": [("res=24", {"dmtet_resolution": 24}),
                  ("res=48", {"dmtet_resolution": 48}),
                  ("no-remesh", {"_no_remesh": True})],
    "edge_len": [("l_t=0.5x", {"_edge_scale": 0.5}),
                 ("l_t=1x", {"_edge_scale": 1.0}),
                 ("l_t=2x", {"_edge_scale": 2.0})],
}
ABLATION_COLUMNS = ["suite", "config", "chamfer", "verts", "seconds", "peak_mb"]


def _suite_config(base: TrainConfig, knobs: dict) -> TrainConfig:
    kw = {k: v for k, v in knobs.items() if not k.startswith("_")}
    if knobs.get("_no_remesh"):
        kw["iters_dmtet"] = base.iters_total
    if "_edge_scale" in knobs:
        kw["target_edge"] = base.target_edge * knobs["_edge_scale"]
    return base.replace(**kw)


def _memory_estimate(result) -> int:
    """Render buffers at their peak plus the final mesh arrays, in bytes."""
    m = result.mesh
    return int(result.peak_bytes + m.vertices.nbytes + m.faces.nbytes + m.colors.nbytes)


def run_ablation(suite: str, dataset: Dataset, base: TrainConfig, out_dir=None,
                 samples: int = 100000) -> list[dict]:
    """Retrain once per setting of ``suite`` and collect Chamfer/size/time rows."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    rows = []
    for label, knobs in SUITES[suite]:
        cfg = _suite_config(base, knobs)
        sub = None if out_dir is None else Path(out_dir) / label.replace("=", "_")
        log.info("ablation %s: %s", suite, label)
        res = train_loop(dataset, cfg, sub)
        cd = mesh_chamfer(res.mesh, dataset.gt_points, samples, cfg.seed)
        rows.append({"suite": suite, "config": label, "chamfer": cd,
                     "verts": res.mesh.n_vertices, "seconds": res.seconds,
                     "peak_mb": _memory_estimate(res) / 2**20})
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / f"ablation_{suite}.csv")
    return rows


def write_ablation_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(CHAMFER_HEADER + "\n")
    w = csv.DictWriter(buf, ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if k in ("chamfer", "seconds", "peak_mb") else r[k])
                    for k in ABLATION_COLUMNS})
    Path(path).write_text(buf.getvalue())


def read_ablation_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        for k in ("chamfer", "seconds", "peak_mb"):
            r[k] = float(r[k])
        r["verts"] = int(r["verts"])
    return rows


def report(paths, scene: str = "") -> str:
    """Summary table (Memory, Training, Vertices, CD) over ablation CSVs."""
    rows = [r for p in paths for r in read_ablation_csv(p)]
    head = f"scene: {scene}\n" if scene else ""
    lines = [f"{'suite':<10} {'config':<10} {'Memory(MB)':>11} {'Training(s)':>12} "
             f"{'Vertices':>9} {'CD':>11}"]
    for r in rows:
        lines.append(f"{r['suite']:<10} {r['config']:<10} {r['peak_mb']:>11.1f} "
                     f"{r['seconds']:>12.1f} {r['verts']:>9d} {r['chamfer']:>11.6f}")
    return head + "\n".join(lines) + "\n"
