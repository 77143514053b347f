"""Tile-based differentiable splatting of softened mesh layers.

Pipeline per view: project every layer triangle, bin it to 16x16 screen
tiles by its 2D bounding box, build per-pixel fragment lists with
perspective-corrected barycentrics, sort them near to far and alpha
composite.  The backward pass differentiates the compositing sum with
respect to fragment alphas and colors, then pushes those through the
barycentric interpolation to per-layer-vertex alphas and per-vertex colors.
Screen-space coverage is treated as constant, so geometry only receives
gradient through the alpha path (see ``soften``).

``oracle_render`` is an independent brute-force implementation (exact 3D
ray/triangle tests for every pixel against every triangle) sharing only the
culling policy and the compositing routine.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .appearance import vertex_color_backward
from .geometry import AREA_EPS, BARY_EPS, Camera, Image, ray_triangle_intersect_many
from .soften import LayerSet, AlphaParams, sdf_to_alpha_backward, signed_distance_backward

log = logging.getLogger(__name__)

TILE = 16
MAX_FRAGMENTS = 64
EARLY_STOP = 1e-4


@dataclass
class Fragment:
    layer: int
    face: int
    depth: float
    bary: np.ndarray
    alpha: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class RenderOutput:
    color: Image
    opacity: Image
    fragment_counts: np.ndarray
    transmittance: np.ndarray | None = None


@dataclass
class GradientBuffer:
    """Accumulated gradients; ``d_beta`` is taken w.r.t. the raw parameter b."""

    d_positions: np.ndarray
    d_colors: np.ndarray
    d_beta: float = 0.0
    d_sdf: np.ndarray | None = None
    d_alphas: np.ndarray | None = None

    @classmethod
    def zeros(cls, n_vertices: int) -> "GradientBuffer":
        return cls(np.zeros((n_vertices, 3)), np.zeros((n_vertices, 3)))


# ----------------------------------------------------------------- culling

@dataclass
class TriangleTable:
    """Screen-space data for all ``N * F`` layer triangles (id = layer*F + face)."""

    sx: np.ndarray      # (T, 3) pixel x
    sy: np.ndarray      # (T, 3) pixel y
    sz: np.ndarray      # (T, 3) camera depth
    valid: np.ndarray   # (T,) bool
    n_faces: int
    n_vertices: int


def triangle_table(layers: LayerSet, camera: Camera) -> TriangleTable:
    faces = layers.faces
    n, nv = layers.layer_vertices.shape[:2]
    pc = layers.layer_vertices.reshape(-1, 3) @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal[0] * pc[:, 0] / z + camera.principal[0]
        v = camera.focal[1] * pc[:, 1] / z + camera.principal[1]
    idx = (np.arange(n)[:, None, None] * nv + faces[None]).reshape(-1, 3)
    sx, sy, sz = u[idx], v[idx], z[idx]
    p = layers.layer_vertices.reshape(-1, 3)[idx]
    area3 = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    inside = ((sz > camera.near) & (sz < camera.far)).all(axis=1)
    crossing = ~inside & (sz > camera.near).any(axis=1)
    if crossing.any():
        log.debug("culled %d triangles crossing the near/far planes", int(crossing.sum()))
    with np.errstate(invalid="ignore"):
        area2 = (sx[:, 1] - sx[:, 0]) * (sy[:, 2] - sy[:, 0]) - \
                (sx[:, 2] - sx[:, 0]) * (sy[:, 1] - sy[:, 0])
    valid = inside & (area3 >= AREA_EPS) & (np.abs(area2) > 1e-12)
    return TriangleTable(np.ascontiguousarray(sx), np.ascontiguousarray(sy),
                         np.ascontiguousarray(sz), valid, len(faces), nv)


# ------------------------------------------------------------------ binning

@dataclass
class TileBins:
    tiles_x: int
    tiles_y: int
    tile: int
    offsets: np.ndarray   # (tiles+1,) CSR offsets
    tris: np.ndarray      # triangle ids grouped by tile, ascending within a tile

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        k = ty * self.tiles_x + tx
        return self.tris[self.offsets[k]:self.offsets[k + 1]]


def _bin(table: TriangleTable, width: int, height: int, tile: int) -> TileBins:
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    ids = np.flatnonzero(table.valid)
    xmin, xmax = table.sx[ids].min(1), table.sx[ids].max(1)
    ymin, ymax = table.sy[ids].min(1), table.sy[ids].max(1)
    on = (xmax >= 0) & (xmin <= width) & (ymax >= 0) & (ymin <= height)
    ids, xmin, xmax, ymin, ymax = ids[on], xmin[on], xmax[on], ymin[on], ymax[on]
    tx0 = np.clip(np.floor(xmin / tile), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor(xmax / tile), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor(ymin / tile), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor(ymax / tile), 0, nty - 1).astype(np.int64)
    nx = tx1 - tx0 + 1
    cnt = nx * (ty1 - ty0 + 1)
    total = int(cnt.sum())
    owner = np.repeat(np.arange(len(ids)), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = tx0[owner] + local % nx[owner]
    ty = ty0[owner] + local // nx[owner]
    key = ty * ntx + tx
    order = np.argsort(key, kind="stable")
    tris = ids[owner[order]]
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(key, minlength=ntx * nty), out=offsets[1:])
    return TileBins(ntx, nty, tile, offsets, tris.astype(np.int64))


def bin_triangles(layers: LayerSet, camera: Camera, tile: int = TILE) -> TileBins:
    """Assign every visible layer triangle to the tiles its 2D AABB overlaps."""
    return _bin(triangle_table(layers, camera), camera.width, camera.height, tile)


# ------------------------------------------------------------ numba kernels

@nb.njit(cache=True)
def _insert(count, cap, z, tri, w0, w1, w2, buf_tri, buf_w, buf_z):
    # keep the buffer sorted by (z, tri); drop the farthest when full
    n = count
    if n == cap:
        lz = buf_z[n - 1]
        if z > lz or (z == lz and tri > buf_tri[n - 1]):
            return n
        n -= 1
    j = n
    while j > 0:
        pz = buf_z[j - 1]
        if pz < z or (pz == z and buf_tri[j - 1] < tri):
            break
        buf_z[j] = buf_z[j - 1]
        buf_tri[j] = buf_tri[j - 1]
        buf_w[j, 0] = buf_w[j - 1, 0]
        buf_w[j, 1] = buf_w[j - 1, 1]
        buf_w[j, 2] = buf_w[j - 1, 2]
        j -= 1
    buf_z[j] = z
    buf_tri[j] = tri
    buf_w[j, 0] = w0
    buf_w[j, 1] = w1
    buf_w[j, 2] = w2
    return n + 1


@nb.njit(cache=True)
def _fragment_at(px, py, t, sx, sy, sz, eps):
    """Screen barycentrics of pixel center (px, py) in triangle t.

    Returns (hit, z, w0, w1, w2) with perspective-corrected weights.
    """
    x0, x1, x2 = sx[t, 0], sx[t, 1], sx[t, 2]
    y0, y1, y2 = sy[t, 0], sy[t, 1], sy[t, 2]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    a0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
    a1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
    a2 = 1.0 - a0 - a1
    if a0 < -eps or a1 < -eps or a2 < -eps:
        return False, 0.0, 0.0, 0.0, 0.0
    q0 = a0 / sz[t, 0]
    q1 = a1 / sz[t, 1]
    q2 = a2 / sz[t, 2]
    s = q0 + q1 + q2
    return True, 1.0 / s, q0 / s, q1 / s, q2 / s


@nb.njit(cache=True, parallel=True)
def _rasterize(offsets, tris, sx, sy, sz, width, height, tile, ntx, cap, eps,
               count, ftri, fw, fz):
    ntiles = len(offsets) - 1
    for k in nb.prange(ntiles):
        tyi = k // ntx
        txi = k - tyi * ntx
        x_lo = txi * tile
        y_lo = tyi * tile
        x_hi = min(x_lo + tile, width)
        y_hi = min(y_lo + tile, height)
        for y in range(y_lo, y_hi):
            for x in range(x_lo, x_hi):
                count[y * width + x] = 0
        for m in range(offsets[k], offsets[k + 1]):
            t = tris[m]
            bx0 = max(x_lo, int(np.floor(min(sx[t, 0], sx[t, 1], sx[t, 2]) - 0.5)))
            bx1 = min(x_hi - 1, int(np.ceil(max(sx[t, 0], sx[t, 1], sx[t, 2]) - 0.5)))
            by0 = max(y_lo, int(np.floor(min(sy[t, 0], sy[t, 1], sy[t, 2]) - 0.5)))
            by1 = min(y_hi - 1, int(np.ceil(max(sy[t, 0], sy[t, 1], sy[t, 2]) - 0.5)))
            for y in range(by0, by1 + 1):
                for x in range(bx0, bx1 + 1):
                    hit, z, w0, w1, w2 = _fragment_at(x + 0.5, y + 0.5, t, sx, sy, sz, eps)
                    if hit:
                        p = y * width + x
                        count[p] = _insert(count[p], cap, z, t, w0, w1, w2,
                                           ftri[p], fw[p], fz[p])


@nb.njit(cache=True)
def _composite_core(alphas, colors, n, stop, weights):
    """Near-to-far blending of n fragments; returns (r, g, b, opacity, T, used)."""
    T = 1.0
    r = 0.0
    g = 0.0
    b = 0.0
    o = 0.0
    used = 0
    for i in range(n):
        if T < stop:
            break
        w = alphas[i] * T
        weights[i] = w
        r += w * colors[i, 0]
        g += w * colors[i, 1]
        b += w * colors[i, 2]
        o += w
        T *= 1.0 - alphas[i]
        used += 1
    for i in range(used, n):
        weights[i] = 0.0
    return r, g, b, o, T, used


@nb.njit(cache=True)
def _frag_attrs(p, i, ftri, fw, faces, nf, nv, valpha, vcolor, col):
    t = ftri[p, i]
    layer = t // nf
    f = t - layer * nf
    a = 0.0
    col[0] = 0.0
    col[1] = 0.0
    col[2] = 0.0
    for k in range(3):
        v = faces[f, k]
        w = fw[p, i, k]
        a += w * valpha[layer * nv + v]
        col[0] += w * vcolor[v, 0]
        col[1] += w * vcolor[v, 1]
        col[2] += w * vcolor[v, 2]
    return a


@nb.njit(cache=True, parallel=True)
def _composite_all(count, ftri, fw, faces, nf, nv, valpha, vcolor, stop,
                   out_rgb, out_o, out_T, out_used):
    npix = len(count)
    cap = ftri.shape[1]
    for p in nb.prange(npix):
        n = count[p]
        al = np.empty(cap)
        cl = np.empty((cap, 3))
        wt = np.empty(cap)
        for i in range(n):
            al[i] = _frag_attrs(p, i, ftri, fw, faces, nf, nv, valpha, vcolor, cl[i])
        r, g, b, o, T, used = _composite_core(al, cl, n, stop, wt)
        out_rgb[p, 0] = r
        out_rgb[p, 1] = g
        out_rgb[p, 2] = b
        out_o[p] = o
        out_T[p] = T
        out_used[p] = used


@nb.njit(cache=True)
def _composite_backward_core(al, cl, used, gr, gg, gb, go, d_alpha, d_col):
    """Gradients of (C, O) w.r.t. each fragment's alpha and color."""
    T = 1.0
    trans = np.empty(used)
    for i in range(used):
        trans[i] = T
        T *= 1.0 - al[i]
    # color/opacity seen behind fragment i, built back to front
    br = 0.0
    bg = 0.0
    bb = 0.0
    bo = 0.0
    for i in range(used - 1, -1, -1):
        Ti = trans[i]
        w = al[i] * Ti
        d_col[i, 0] = w * gr
        d_col[i, 1] = w * gg
        d_col[i, 2] = w * gb
        d_alpha[i] = Ti * ((cl[i, 0] - br) * gr + (cl[i, 1] - bg) * gg +
                           (cl[i, 2] - bb) * gb + (1.0 - bo) * go)
        a = al[i]
        br = a * cl[i, 0] + (1.0 - a) * br
        bg = a * cl[i, 1] + (1.0 - a) * bg
        bb = a * cl[i, 2] + (1.0 - a) * bb
        bo = a + (1.0 - a) * bo


@nb.njit(cache=True, parallel=True)
def _backward_pixels(count, used_arr, ftri, fw, faces, nf, nv, valpha, vcolor,
                     g_rgb, g_o, out_da, out_dc):
    npix = len(count)
    cap = ftri.shape[1]
    for p in nb.prange(npix):
        used = used_arr[p]
        if used == 0:
            continue
        al = np.empty(cap)
        cl = np.empty((cap, 3))
        for i in range(used):
            al[i] = _frag_attrs(p, i, ftri, fw, faces, nf, nv, valpha, vcolor, cl[i])
        _composite_backward_core(al, cl, used, g_rgb[p, 0], g_rgb[p, 1], g_rgb[p, 2],
                                 g_o[p], out_da[p], out_dc[p])


@nb.njit(cache=True)
def _scatter(used_arr, ftri, fw, faces, nf, nv, da, dc, g_alpha, g_color):
    # serial, fixed pixel order: bitwise reproducible accumulation
    for p in range(len(used_arr)):
        for i in range(used_arr[p]):
            t = ftri[p, i]
            layer = t // nf
            f = t - layer * nf
            for k in range(3):
                v = faces[f, k]
                w = fw[p, i, k]
                g_alpha[layer * nv + v] += w * da[p, i]
                g_color[v, 0] += w * dc[p, i, 0]
                g_color[v, 1] += w * dc[p, i, 1]
                g_color[v, 2] += w * dc[p, i, 2]


# ------------------------------------------------------------------ drivers

@dataclass
class RenderState:
    """Fragment buffers kept from the forward pass for the backward pass."""

    table: TriangleTable
    bins: TileBins
    count: np.ndarray
    ftri: np.ndarray
    fw: np.ndarray
    fz: np.ndarray
    used: np.ndarray
    faces: np.ndarray
    valpha: np.ndarray
    vcolor: np.ndarray
    early_stop: float

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.count, self.ftri, self.fw, self.fz, self.used,
                                      self.table.sx, self.table.sy, self.table.sz))


def _rasterize_layers(layers, camera, tile, cap, timings):
    t0 = time.perf_counter()
    table = triangle_table(layers, camera)
    bins = _bin(table, camera.width, camera.height, tile)
    t1 = time.perf_counter()
    npix = camera.width * camera.height
    count = np.zeros(npix, dtype=np.int64)
    ftri = np.empty((npix, cap), dtype=np.int64)
    fw = np.empty((npix, cap, 3))
    fz = np.empty((npix, cap))
    if len(bins.tris):
        _rasterize(bins.offsets, bins.tris, table.sx, table.sy, table.sz, camera.width,
                   camera.height, tile, bins.tiles_x, cap, BARY_EPS, count, ftri, fw, fz)
    t2 = time.perf_counter()
    if timings is not None:
        timings["bin"] = timings.get("bin", 0.0) + (t1 - t0)
        timings["fragment"] = timings.get("fragment", 0.0) + (t2 - t1)
    return table, bins, count, ftri, fw, fz


def render(layers: LayerSet, camera: Camera, *, tile: int = TILE, cap: int = MAX_FRAGMENTS,
           early_stop: float | None = EARLY_STOP, timings: dict | None = None,
           return_state: bool = False):
    """Render a softened layer set; background is black.

    ``early_stop=None`` disables early termination (exact gradient checks).
    With ``return_state`` returns ``(RenderOutput, RenderState)``.
    """
    h, w = camera.height, camera.width
    stop = -1.0 if early_stop is None else float(early_stop)
    faces = np.ascontiguousarray(layers.faces, dtype=np.int64)
    valpha = np.ascontiguousarray(layers.alphas, dtype=np.float64).reshape(-1)
    vcolor = np.ascontiguousarray(layers.colors, dtype=np.float64)
    if len(faces) == 0 or layers.num_layers == 0:
        out = RenderOutput(Image(np.zeros((h, w, 3))), Image(np.zeros((h, w, 1))),
                           np.zeros((h, w), dtype=np.int64), np.ones((h, w)))
        if return_state:
            table = TriangleTable(*(np.zeros((0, 3)),) * 3, np.zeros(0, bool), 0, 0)
            bins = TileBins(0, 0, tile, np.zeros(1, np.int64), np.zeros(0, np.int64))
            z = np.zeros(h * w, np.int64)
            st = RenderState(table, bins, z, np.zeros((h * w, cap), np.int64),
                             np.zeros((h * w, cap, 3)), np.zeros((h * w, cap)), z.copy(),
                             faces, valpha, vcolor, stop)
            return out, st
        return out
    table, bins, count, ftri, fw, fz = _rasterize_layers(layers, camera, tile, cap, timings)
    t0 = time.perf_counter()
    rgb = np.empty((h * w, 3))
    opa = np.empty(h * w)
    trans = np.empty(h * w)
    used = np.empty(h * w, dtype=np.int64)
    _composite_all(count, ftri, fw, faces, table.n_faces, table.n_vertices, valpha, vcolor,
                   stop, rgb, opa, trans, used)
    if timings is not None:
        timings["composite"] = timings.get("composite", 0.0) + time.perf_counter() - t0
    out = RenderOutput(Image(rgb.reshape(h, w, 3)), Image(opa.reshape(h, w, 1)),
                       count.reshape(h, w), trans.reshape(h, w))
    if return_state:
        return out, RenderState(table, bins, count, ftri, fw, fz, used, faces, valpha, vcolor,
                                stop)
    return out


def composite_backward(state: RenderState, dL_dcolor, dL_dopacity=None):
    """Gradients w.r.t. per-layer-vertex alphas ``(N*V,)`` and colors ``(V, 3)``."""
    npix = len(state.count)
    cap = state.ftri.shape[1]
    g_rgb = np.ascontiguousarray(np.asarray(dL_dcolor, dtype=np.float64).reshape(npix, 3))
    if dL_dopacity is None:
        g_o = np.zeros(npix)
    else:
        g_o = np.ascontiguousarray(np.asarray(dL_dopacity, dtype=np.float64).reshape(npix))
    nf, nv = state.table.n_faces, state.table.n_vertices
    g_alpha = np.zeros(len(state.valpha))
    g_color = np.zeros_like(state.vcolor)
    if nf == 0:
        return g_alpha, g_color
    da = np.zeros((npix, cap))
    dc = np.zeros((npix, cap, 3))
    _backward_pixels(state.count, state.used, state.ftri, state.fw, state.faces, nf, nv,
                     state.valpha, state.vcolor, g_rgb, g_o, da, dc)
    _scatter(state.used, state.ftri, state.fw, state.faces, nf, nv, da, dc, g_alpha, g_color)
    return g_alpha, g_color


def _check_finite(name, g, width):
    g = np.asarray(g)
    if not np.isfinite(g).all():
        bad = np.argwhere(~np.isfinite(g))[0]
        raise FloatingPointError(f"non-finite {name} gradient at pixel "
                                 f"(row={bad[0]}, col={bad[1]})")


def render_backward(layers: LayerSet, camera: Camera, dL_dcolor, dL_dopacity=None,
                    params: AlphaParams | None = None, state: RenderState | None = None,
                    timings: dict | None = None, **render_kw) -> GradientBuffer:
    """Analytic gradients of a scalar loss given its image-space gradients.

    ``dL_dcolor`` is ``(H, W, 3)``; ``dL_dopacity`` optional ``(H, W)`` or
    ``(H, W, 1)``.  Positions get gradient only through the signed-distance
    path; ``params`` is needed for the alpha map (defaults to beta=1).
    """
    h, w = camera.height, camera.width
    gc = np.asarray(dL_dcolor, dtype=np.float64).reshape(h, w, 3)
    _check_finite("color", gc, w)
    go = None
    if dL_dopacity is not None:
        go = np.asarray(dL_dopacity, dtype=np.float64).reshape(h, w)
        _check_finite("opacity", go, w)
    if params is None:
        params = AlphaParams()
    if state is None:
        _, state = render(layers, camera, return_state=True, **render_kw)
    t0 = time.perf_counter()
    g_alpha, g_color = composite_backward(state, gc, go)
    n, nv = layers.offsets.shape
    g_alpha = g_alpha.reshape(n, nv)
    dL_ds, dL_db = sdf_to_alpha_backward(layers.signed_dists, params, g_alpha)
    d_pos = signed_distance_backward(layers, dL_ds)
    d_col = vertex_color_backward(layers.base.colors, g_color)
    if timings is not None:
        timings["backward"] = timings.get("backward", 0.0) + time.perf_counter() - t0
    return GradientBuffer(d_positions=d_pos, d_colors=d_col, d_beta=dL_db, d_alphas=g_alpha)


# ------------------------------------------------------------ python views

def make_fragments(bins: TileBins, layers: LayerSet, camera: Camera, pixel) -> list[Fragment]:
    """Depth-sorted fragments at pixel ``(x, y)`` from its tile's candidates."""
    x, y = pixel
    table = triangle_table(layers, camera)
    cand = bins.tile_list(x // bins.tile, y // bins.tile)
    cap = MAX_FRAGMENTS
    ftri = np.empty(cap, np.int64)
    fw = np.empty((cap, 3))
    fz = np.empty(cap)
    n = 0
    for t in cand:
        hit, z, w0, w1, w2 = _fragment_at(x + 0.5, y + 0.5, int(t), table.sx, table.sy,
                                          table.sz, BARY_EPS)
        if hit:
            n = _insert(n, cap, z, t, w0, w1, w2, ftri, fw, fz)
    return [_make_fragment(layers, int(ftri[i]), fz[i], fw[i].copy()) for i in range(n)]


def _make_fragment(layers, t, z, bary):
    nf = len(layers.faces)
    layer, f = divmod(t, nf)
    vids = layers.faces[f]
    alpha = float(bary @ layers.alphas[layer, vids]) if layers.alphas is not None else 0.0
    color = bary @ layers.colors[vids] if layers.colors is not None else np.zeros(3)
    return Fragment(layer, f, float(z), bary, alpha, color)


def composite(fragments, early_stop: float | None = EARLY_STOP):
    """Blend near-to-far fragments; returns ``(C (3,), O, weights)``."""
    n = len(fragments)
    al = np.array([f.alpha for f in fragments], dtype=np.float64).reshape(n)
    cl = np.array([f.color for f in fragments], dtype=np.float64).reshape(n, 3)
    wt = np.zeros(n)
    stop = -1.0 if early_stop is None else float(early_stop)
    r, g, b, o, _, _ = _composite_core(al, cl, n, stop, wt)
    return np.array([r, g, b]), o, wt


# ------------------------------------------------------------------- oracle

def _oracle_hits(layers, camera):
    """All exact ray/triangle hits as (pixel, tri, depth, bary) arrays."""
    table = triangle_table(layers, camera)
    origin, dirs = camera.pixel_rays()
    dirs = dirs.reshape(-1, 3)
    zdir = dirs @ camera.rotation[2]
    nf = table.n_faces
    lv = layers.layer_vertices
    pix, tri, dep, bar = [], [], [], []
    for t in np.flatnonzero(table.valid):
        layer, f = divmod(int(t), nf)
        hit, tt, bary = ray_triangle_intersect_many(origin, dirs, lv[layer, layers.faces[f]])
        idx = np.flatnonzero(hit)
        if len(idx) == 0:
            continue
        pix.append(idx)
        tri.append(np.full(len(idx), t))
        dep.append(tt[idx] * zdir[idx])
        bar.append(bary[idx])
    if not pix:
        return (np.zeros(0, np.int64),) * 2 + (np.zeros(0), np.zeros((0, 3)))
    return np.concatenate(pix), np.concatenate(tri), np.concatenate(dep), np.concatenate(bar)


def oracle_fragments(layers: LayerSet, camera: Camera, cap: int = MAX_FRAGMENTS):
    """Per-pixel sorted fragment lists ``{pixel_index: [Fragment, ...]}``."""
    pix, tri, dep, bar = _oracle_hits(layers, camera)
    order = np.lexsort((tri, dep, pix))
    out: dict[int, list[Fragment]] = {}
    for k in order:
        lst = out.setdefault(int(pix[k]), [])
        if len(lst) < cap:
            lst.append(_make_fragment(layers, int(tri[k]), dep[k], bar[k]))
    return out


def oracle_render(layers: LayerSet, camera: Camera, *, cap: int = MAX_FRAGMENTS,
                  early_stop: float | None = EARLY_STOP) -> RenderOutput:
    """Brute-force reference renderer (small scenes only)."""
    h, w = camera.height, camera.width
    rgb = np.zeros((h * w, 3))
    opa = np.zeros(h * w)
    trans = np.ones(h * w)
    counts = np.zeros(h * w, dtype=np.int64)
    if len(layers.faces) and layers.num_layers:
        stop = -1.0 if early_stop is None else float(early_stop)
        for p, frags in oracle_fragments(layers, camera, cap).items():
            n = len(frags)
            al = np.array([f.alpha for f in frags])
            cl = np.array([f.color for f in frags]).reshape(n, 3)
            r, g, b, o, T, _ = _composite_core(al, cl, n, stop, np.zeros(n))
            rgb[p] = (r, g, b)
            opa[p] = o
            trans[p] = T
            counts[p] = n
    return RenderOutput(Image(rgb.reshape(h, w, 3)), Image(opa.reshape(h, w, 1)),
                        counts.reshape(h, w), trans.reshape(h, w))


@nb.njit(cache=True)
def _first_hit(origin, dirs, zdir, verts, faces, cols, u, v, z, near, far, eps, best, rgb):
    h, w = best.shape
    for f in range(len(faces)):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        ok = True
        for k in (i0, i1, i2):
            if z[k] <= near or z[k] >= far:
                ok = False
        if not ok:
            continue
        x0 = max(int(np.floor(min(u[i0], min(u[i1], u[i2])))) - 1, 0)
        x1 = min(int(np.ceil(max(u[i0], max(u[i1], u[i2])))) + 1, w)
        y0 = max(int(np.floor(min(v[i0], min(v[i1], v[i2])))) - 1, 0)
        y1 = min(int(np.ceil(max(v[i0], max(v[i1], v[i2])))) + 1, h)
        a = verts[i0]
        e1 = verts[i1] - a
        e2 = verts[i2] - a
        scale = np.sqrt((e1 * e1).sum()) * np.sqrt((e2 * e2).sum())
        if scale == 0:
            continue
        tv = origin - a
        qv = np.empty(3)
        qv[0] = tv[1] * e1[2] - tv[2] * e1[1]
        qv[1] = tv[2] * e1[0] - tv[0] * e1[2]
        qv[2] = tv[0] * e1[1] - tv[1] * e1[0]
        for py in range(y0, y1):
            for px in range(x0, x1):
                d = dirs[py, px]
                p0 = d[1] * e2[2] - d[2] * e2[1]
                p1 = d[2] * e2[0] - d[0] * e2[2]
                p2 = d[0] * e2[1] - d[1] * e2[0]
                det = p0 * e1[0] + p1 * e1[1] + p2 * e1[2]
                if abs(det) <= 1e-14 * scale:
                    continue
                inv = 1.0 / det
                bu = (p0 * tv[0] + p1 * tv[1] + p2 * tv[2]) * inv
                bv = (d[0] * qv[0] + d[1] * qv[1] + d[2] * qv[2]) * inv
                t = (e2[0] * qv[0] + e2[1] * qv[1] + e2[2] * qv[2]) * inv
                b0 = 1.0 - bu - bv
                if min(b0, min(bu, bv)) < -eps or max(b0, max(bu, bv)) > 1 + eps or t <= 0:
                    continue
                depth = t * zdir[py, px]
                if depth < best[py, px]:
                    best[py, px] = depth
                    for c in range(3):
                        rgb[py, px, c] = b0 * cols[i0, c] + bu * cols[i1, c] + bv * cols[i2, c]


def render_first_hit(mesh_vertices, faces, vertex_colors, camera: Camera):
    """Opaque nearest-surface render (alpha forced to 1), exact ray casting.

    Returns ``(rgb (H, W, 3), mask (H, W))``.  Each triangle is only tested
    against the pixels inside its projected bounding box (plus a 1 px margin).
    """
    h, w = camera.height, camera.width
    origin, dirs = camera.pixel_rays()
    verts = np.ascontiguousarray(mesh_vertices, dtype=np.float64)
    pc = verts @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal[0] * pc[:, 0] / z + camera.principal[0]
        v = camera.focal[1] * pc[:, 1] / z + camera.principal[1]
    best = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))
    _first_hit(np.asarray(origin, np.float64), np.ascontiguousarray(dirs),
               np.ascontiguousarray(dirs @ camera.rotation[2]), verts,
               np.ascontiguousarray(faces, dtype=np.int64),
               np.ascontiguousarray(vertex_colors, dtype=np.float64), u, v, z,
               float(camera.near), float(camera.far), BARY_EPS, best, rgb)
    mask = np.isfinite(best).astype(np.float64)
    return rgb, mask
