"""Tetrahedral-grid SDF parameterization and differentiable marching tets.

The grid is a regular lattice with every cube cut into six tetrahedra
around its main diagonal (Kuhn/Freudenthal split), so neighbouring cubes
agree on their shared face diagonals.  Grid vertex positions are fixed;
only the SDF values (and the per-grid-vertex colors used during the warmup
stage) are optimized.
"""
from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Mesh

log = logging.getLogger(__name__)

TIE_EPS = 1e-10
_MAGIC = b"TETGRID1"


class ConfigError(ValueError):
    pass


@dataclass
class TetGrid:
    grid_vertices: np.ndarray   # (G, 3)
    tets: np.ndarray            # (K, 4), positively oriented
    sdf: np.ndarray             # (G,)
    resolution: int
    bbox: np.ndarray            # (2, 3) min/max corners
    colors: np.ndarray | None = None  # (G, 3) raw colors, warmup-stage appearance

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bbox[1] - self.bbox[0]) / self.resolution

    def lattice_index(self, ids) -> np.ndarray:
        """(i, j, k) lattice coordinates of grid vertex ids."""
        n = self.resolution + 1
        ids = np.asarray(ids)
        return np.stack([ids // (n * n), (ids // n) % n, ids % n], axis=-1)


@dataclass
class ExtractionMap:
    """Per extracted vertex: grid edge ``(a, b)`` and crossing parameter ``t``.

    The vertex sits at ``x_a + t (x_b - x_a)`` with ``t = s_a / (s_a - s_b)``.
    """

    a: np.ndarray
    b: np.ndarray
    t: np.ndarray


def _kuhn_tets():
    """Six tets of the unit cube as corner-offset tuples, positively oriented."""
    out = []
    for perm in itertools.permutations(range(3)):
        p = np.zeros(3, dtype=int)
        chain = [p.copy()]
        for axis in perm:
            p[axis] += 1
            chain.append(p.copy())
        a, b, c, d = (q.astype(float) for q in chain)
        if np.linalg.det(np.stack([b - a, c - a, d - a])) < 0:
            chain[1], chain[2] = chain[2], chain[1]
        out.append(chain)
    return np.array(out)  # (6, 4, 3)


def build_grid(resolution: int, bbox=((-1.25,) * 3, (1.25,) * 3)) -> TetGrid:
    if resolution < 2:
        raise ConfigError("grid resolution must be >= 2")
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    n = resolution + 1
    axes = [np.linspace(bbox[0, k], bbox[1, k], n) for k in range(3)]
    gv = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    c = np.arange(resolution)
    ci, cj, ck = (x.ravel() for x in np.meshgrid(c, c, c, indexing="ij"))
    tets = []
    for chain in _kuhn_tets():
        ids = [(ci + o[0]) * n * n + (cj + o[1]) * n + (ck + o[2]) for o in chain]
        tets.append(np.stack(ids, axis=1))
    # interleave so tets of one cube are contiguous
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return TetGrid(gv, tets.astype(np.int64), np.zeros(len(gv)), resolution, bbox)


def init_sphere_sdf(grid: TetGrid, center=(0.0, 0.0, 0.0), r: float = 0.5) -> None:
    if r <= 0:
        raise ValueError("sphere radius must be positive")
    grid.sdf = np.linalg.norm(grid.grid_vertices - np.asarray(center, float), axis=1) - r


def tet_signed_volumes(grid: TetGrid) -> np.ndarray:
    p = grid.grid_vertices[grid.tets]
    return np.linalg.det(np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0],
                                   p[:, 3] - p[:, 0]], axis=1)) / 6.0


# --------------------------------------------------------------- case table

_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
_EDGE_ID = {(int(a), int(b)): k for k, (a, b) in enumerate(_TET_EDGES)}


def _edge(i, j):
    return _EDGE_ID[(min(i, j), max(i, j))]


def _build_case_table():
    """(16, 2, 3) local edge ids per case, -1 padded, oriented toward +SDF.

    Orientation is fixed once on a reference positive tet; it carries over to
    every positively oriented tet since the emitted polygon only depends on
    the sign pattern.
    """
    ref = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    table = -np.ones((16, 2, 3), dtype=np.int64)
    for code in range(16):
        pos = [k for k in range(4) if code >> k & 1]
        neg = [k for k in range(4) if not code >> k & 1]
        if len(pos) in (0, 4):
            continue
        if len(pos) == 1 or len(neg) == 1:
            lone = pos[0] if len(pos) == 1 else neg[0]
            others = [k for k in range(4) if k != lone]
            polys = [[_edge(lone, o) for o in others]]
        else:
            a, b = neg
            c, d = pos
            quad = [_edge(a, c), _edge(a, d), _edge(b, d), _edge(b, c)]
            polys = [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
        dirn = ref[pos].mean(0) - ref[neg].mean(0)
        for k, tri in enumerate(polys):
            pts = [ref[_TET_EDGES[e]].mean(0) for e in tri]
            nrm = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            if nrm @ dirn < 0:
                tri = [tri[0], tri[2], tri[1]]
            table[code, k] = tri
    return table


_CASES = _build_case_table()


# --------------------------------------------------------------- extraction

def _trilinear(grid: TetGrid, a, b, t, values):
    """Trilinear interpolation of grid ``values`` at points on edges (a, b).

    Returns ``(value (M, C), d value / d t (M, C), corner ids (M, 8),
    corner weights (M, 8))``.  The cell is the cube containing the edge, so
    the result does not depend on floating-point cell lookup.
    """
    ia = grid.lattice_index(a)
    ib = grid.lattice_index(b)
    res = grid.resolution
    cell = np.minimum(np.minimum(ia, ib), res - 1)
    fa = (ia - cell).astype(float)
    df = (ib - ia).astype(float)
    f = fa + t[:, None] * df
    n = res + 1
    ids = np.empty((len(t), 8), dtype=np.int64)
    wts = np.empty((len(t), 8))
    dwt = np.empty((len(t), 8))
    k = 0
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                off = np.array([ox, oy, oz])
                c = cell + off
                ids[:, k] = c[:, 0] * n * n + c[:, 1] * n + c[:, 2]
                fac = np.where(off == 1, f, 1.0 - f)          # (M, 3)
                dfac = np.where(off == 1, df, -df)
                wts[:, k] = fac.prod(1)
                dwt[:, k] = (dfac[:, 0] * fac[:, 1] * fac[:, 2] + fac[:, 0] * dfac[:, 1] * fac[:, 2]
                             + fac[:, 0] * fac[:, 1] * dfac[:, 2])
                k += 1
    val = np.einsum("mk,mkc->mc", wts, values[ids])
    dval = np.einsum("mk,mkc->mc", dwt, values[ids])
    return val, dval, ids, wts


def marching_tets(grid: TetGrid):
    """Extract the zero level set as a mesh plus its edge map.

    Surface normals point toward positive SDF.  Extracted colors are
    trilinear interpolations of ``grid.colors`` when present.
    """
    sdf = grid.sdf
    zero = sdf == 0
    if zero.any():
        log.info("perturbing %d exact-zero SDF values by %g", int(zero.sum()), TIE_EPS)
        sdf = np.where(zero, TIE_EPS, sdf)
        grid.sdf = sdf
    pos = sdf > 0
    occ = pos[grid.tets]
    code = occ[:, 0] * 1 + occ[:, 1] * 2 + occ[:, 2] * 4 + occ[:, 3] * 8
    live = (code != 0) & (code != 15)
    tets = grid.tets[live]
    code = code[live]
    if len(tets) == 0:
        emap = ExtractionMap(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64)), emap
    edges = tets[:, _TET_EDGES]                       # (K, 6, 2)
    edges = np.sort(edges, axis=2).reshape(-1, 2)
    ng = len(sdf)
    keys, inv = np.unique(edges[:, 0] * ng + edges[:, 1], return_inverse=True)
    inv = inv.reshape(-1, 6)
    ua, ub = keys // ng, keys % ng
    crosses = pos[ua] != pos[ub]
    vid = -np.ones(len(keys), dtype=np.int64)
    vid[crosses] = np.arange(crosses.sum())
    a, b = ua[crosses], ub[crosses]
    sa, sb = sdf[a], sdf[b]
    t = sa / (sa - sb)
    xa, xb = grid.grid_vertices[a], grid.grid_vertices[b]
    verts = xa + t[:, None] * (xb - xa)
    local = vid[inv]                                  # (K, 6) vertex per tet edge
    tri_edges = _CASES[code]                          # (K, 2, 3)
    faces = []
    for k in range(2):
        te = tri_edges[:, k]
        has = te[:, 0] >= 0
        faces.append(np.take_along_axis(local[has], te[has], axis=1))
    faces = np.concatenate(faces)
    colors = None
    if grid.colors is not None:
        colors = _trilinear(grid, a, b, t, grid.colors)[0]
    return Mesh(verts, faces, colors), ExtractionMap(a, b, t)


def backprop_to_sdf(emap: ExtractionMap, grid: TetGrid, dL_dverts, dL_dcolors=None):
    """Chain mesh-vertex gradients through the zero crossings to the SDF.

    Returns ``d_sdf (G,)``, or ``(d_sdf, d_grid_colors (G, 3))`` when color
    gradients are given (colors depend on ``t`` too).
    """
    a, b, t = emap.a, emap.b, emap.t
    sa, sb = grid.sdf[a], grid.sdf[b]
    den = (sa - sb) ** 2
    dt_dsa = -sb / den
    dt_dsb = sa / den
    edge = grid.grid_vertices[b] - grid.grid_vertices[a]
    dL_dt = np.einsum("mc,mc->m", np.asarray(dL_dverts, float), edge)
    d_colors = None
    if dL_dcolors is not None:
        g = np.asarray(dL_dcolors, float)
        _, dval, ids, wts = _trilinear(grid, a, b, t, grid.colors)
        dL_dt = dL_dt + np.einsum("mc,mc->m", g, dval)
        G = len(grid.sdf)
        flat = ids.ravel()
        wg = (wts[..., None] * g[:, None, :]).reshape(-1, 3)
        d_colors = np.stack([np.bincount(flat, weights=wg[:, c], minlength=G)
                             for c in range(3)], axis=1)
    d_sdf = (np.bincount(a, weights=dL_dt * dt_dsa, minlength=len(grid.sdf))
             + np.bincount(b, weights=dL_dt * dt_dsb, minlength=len(grid.sdf)))
    if dL_dcolors is None:
        return d_sdf
    return d_sdf, d_colors


# ------------------------------------------------------------ checkpointing

def save_grid_state(grid: TetGrid, path) -> None:
    """Flat binary: magic, int32 resolution, 6 float64 bbox, int64 count, sdf."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<i6dq", grid.resolution, *grid.bbox.ravel(), len(grid.sdf)))
        fh.write(np.asarray(grid.sdf, dtype="<f8").tobytes())


def load_grid_state(path) -> TetGrid:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a grid snapshot")
        res, *rest = struct.unpack("<i6dq", fh.read(struct.calcsize("<i6dq")))
        bbox, count = np.array(rest[:6]).reshape(2, 3), rest[6]
        sdf = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
    grid = build_grid(res, bbox)
    if len(sdf) != len(grid.sdf):
        raise ValueError(f"{path}: sdf length {len(sdf)} does not match grid")
    grid.sdf = sdf
    return grid
