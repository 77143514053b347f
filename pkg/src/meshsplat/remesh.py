"""Continuous isotropic remeshing: split, collapse, flip, tangential smooth.

One call performs a single pass of each operation at a fixed target edge
length.  Candidate edges are found with vectorized numpy; the surgery itself
runs sequentially on per-vertex face sets so every operation sees the
topology left by the previous one.

Per-vertex attributes (colors, optimizer moments) follow the geometry: a
vertex created by a split or a collapse takes the average of its two
sources.  Internally each live vertex carries its weights over the input
vertices, so chains of operations within one call compose correctly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .geometry import Mesh, MeshError, compute_vertex_normals, unique_edges


@dataclass
class RemeshConfig:
    target_edge: float
    split_factor: float = 4.0 / 3.0
    collapse_factor: float = 4.0 / 5.0
    smooth_lambda: float = 0.1
    max_ops_per_call: int = 20000
    debug: bool = False

    def __post_init__(self):
        if not 0 < self.collapse_factor < 1 < self.split_factor:
            raise ValueError("need 0 < collapse_factor < 1 < split_factor")
        if self.target_edge <= 0:
            raise ValueError("target_edge must be positive")


@dataclass
class RemeshStats:
    splits: int = 0
    collapses: int = 0
    flips: int = 0


# ---------------------------------------------------------------- topology

def edge_face_incidence(faces: np.ndarray):
    """Unique edges, their face counts and directed-edge multiplicity check.

    Returns ``(edges (E, 2), counts (E,), consistent: bool)``.
    """
    if len(faces) == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0, np.int64), True
    d = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    n = int(faces.max()) + 1
    dkey = d[:, 0] * n + d[:, 1]
    consistent = len(np.unique(dkey)) == len(dkey)
    s = np.sort(d, axis=1)
    keys, counts = np.unique(s[:, 0] * n + s[:, 1], return_counts=True)
    return np.stack([keys // n, keys % n], 1), counts, consistent


def check_manifold(mesh: Mesh, fans: bool = True) -> None:
    """Raise ``MeshError`` unless every edge has one or two consistently
    oriented faces and (with ``fans``) every vertex has a single fan."""
    edges, counts, consistent = edge_face_incidence(mesh.faces)
    if (counts > 2).any():
        raise MeshError("non-manifold edge shared by more than two faces")
    if not consistent:
        raise MeshError("inconsistent face orientation")
    if fans and not vertex_fans_ok(mesh.faces, mesh.n_vertices):
        raise MeshError("non-manifold vertex (more than one fan)")


def vertex_fans_ok(faces: np.ndarray, n_vertices: int) -> bool:
    """True when the faces around every vertex form one connected fan."""
    if len(faces) == 0:
        return True
    # link edges (opposite edge of each face corner), grouped per vertex
    v = faces.reshape(-1)
    nxt = np.roll(faces, -1, axis=1).reshape(-1)
    prv = np.roll(faces, 1, axis=1).reshape(-1)
    order = np.argsort(v, kind="stable")
    v, nxt, prv = v[order], nxt[order], prv[order]
    starts = np.flatnonzero(np.r_[True, v[1:] != v[:-1]])
    ends = np.r_[starts[1:], len(v)]
    for s, e in zip(starts, ends):
        k = e - s
        if k <= 2:
            continue
        parent = {}

        def find(x):
            while parent.get(x, x) != x:
                parent[x] = parent.get(parent[x], parent[x])
                x = parent[x]
            return x

        for a, b in zip(nxt[s:e].tolist(), prv[s:e].tolist()):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb
        roots = {find(x) for x in set(nxt[s:e].tolist()) | set(prv[s:e].tolist())}
        if len(roots) != 1:
            return False
    return True


# ---------------------------------------------------------------- helpers

def _sub(p, q):
    return (p[0] - q[0], p[1] - q[1], p[2] - q[2])


def _cross(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def _dot(u, v):
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


def _tri_normal(p0, p1, p2):
    return _cross(_sub(p1, p0), _sub(p2, p0))


def _dist(p, q):
    d = _sub(p, q)
    return math.sqrt(_dot(d, d))


def _quality(p0, p1, p2):
    la, lb, lc = _dist(p1, p2), _dist(p2, p0), _dist(p0, p1)
    n = _tri_normal(p0, p1, p2)
    area2 = _dot(n, n) / 4.0
    den = (la + lb + lc) * la * lb * lc
    return 16.0 * area2 / den if den > 0 else 0.0


# flips and collapses may not push a triangle below this quality
# unless it already was lower
QUALITY_FLOOR = 0.4


class _Work:
    """Mutable mesh used during one remesh call."""

    def __init__(self, mesh: Mesh):
        self.pos = mesh.vertices.tolist()
        self.faces = mesh.faces.tolist()
        self.face_alive = [True] * len(self.faces)
        nv = len(self.pos)
        self.vf = [set() for _ in range(nv)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vf[v].add(fi)
        self.dead = [False] * nv
        # None = untouched input vertex; otherwise {input vertex: weight}
        self.weights: list = [None] * nv
        edges, counts, _ = edge_face_incidence(mesh.faces)
        bnd = np.zeros(nv, bool)
        bnd[edges[counts == 1].ravel()] = True
        self.boundary = bnd.tolist()

    def w(self, v):
        return self.weights[v] if self.weights[v] is not None else {v: 1.0}

    def avg_weights(self, a, b):
        out = {}
        for src in (self.w(a), self.w(b)):
            for k, x in src.items():
                out[k] = out.get(k, 0.0) + 0.5 * x
        return out

    def neighbors(self, v):
        out = set()
        for f in self.vf[v]:
            out.update(self.faces[f])
        out.discard(v)
        return out

    def valence(self, v):
        return len(self.vf[v]) + (1 if self.boundary[v] else 0)

    def shared(self, a, b):
        return self.vf[a] & self.vf[b]

    def third(self, f, a, b):
        for x in self.faces[f]:
            if x != a and x != b:
                return x
        raise MeshError("degenerate face")

    def live_faces(self):
        return np.array([f for f, ok in zip(self.faces, self.face_alive) if ok],
                        dtype=np.int64).reshape(-1, 3)

    # ---- operations

    def split(self, a, b):
        sh = self.shared(a, b)
        m = len(self.pos)
        pa, pb = self.pos[a], self.pos[b]
        self.pos.append([(pa[0] + pb[0]) * 0.5, (pa[1] + pb[1]) * 0.5, (pa[2] + pb[2]) * 0.5])
        self.weights.append(self.avg_weights(a, b))
        self.dead.append(False)
        self.boundary.append(len(sh) == 1)
        self.vf.append(set())
        for f in sorted(sh):
            face = self.faces[f]
            c = self.third(f, a, b)
            keep = [m if x == b else x for x in face]
            new = [m if x == a else x for x in face]
            self.faces[f] = keep
            self.vf[b].discard(f)
            self.vf[m].add(f)
            g = len(self.faces)
            self.faces.append(new)
            self.face_alive.append(True)
            for x in (m, b, c):
                self.vf[x].add(g)

    def try_collapse(self, a, b, max_len):
        if self.boundary[a] or self.boundary[b]:
            return False
        sh = self.shared(a, b)
        if len(sh) != 2:
            return False
        na, nb = self.neighbors(a), self.neighbors(b)
        opp = {self.third(f, a, b) for f in sh}
        if (na & nb) != opp or len(opp) != 2:
            return False
        if len((na | nb) - {a, b}) < 3 or len(self.vf[a]) + len(self.vf[b]) - 2 < 3:
            return False
        pa, pb = self.pos[a], self.pos[b]
        p = [(pa[0] + pb[0]) * 0.5, (pa[1] + pb[1]) * 0.5, (pa[2] + pb[2]) * 0.5]
        for n in (na | nb) - {a, b}:
            if _dist(p, self.pos[n]) > max_len:
                return False
        for f in (self.vf[a] | self.vf[b]) - sh:
            face = self.faces[f]
            pts_old = [self.pos[x] for x in face]
            pts_new = [p if x in (a, b) else self.pos[x] for x in face]
            old = _tri_normal(*pts_old)
            new = _tri_normal(*pts_new)
            if _dot(old, new) <= 0 or _dot(new, new) <= 1e-30:
                return False
            if _quality(*pts_new) < min(_quality(*pts_old), QUALITY_FLOOR):
                return False
        self.pos[a] = p
        self.weights[a] = self.avg_weights(a, b)
        for f in sh:
            self.face_alive[f] = False
            for x in self.faces[f]:
                self.vf[x].discard(f)
        for f in list(self.vf[b]):
            self.faces[f] = [a if x == b else x for x in self.faces[f]]
            self.vf[a].add(f)
        self.vf[b] = set()
        self.dead[b] = True
        return True

    def try_flip(self, a, b):
        sh = self.shared(a, b)
        if len(sh) != 2:
            return False
        f1, f2 = sorted(sh)
        face = self.faces[f1]
        i = face.index(a)
        if face[(i + 1) % 3] != b:
            f1, f2 = f2, f1
        c = self.third(f1, a, b)
        d = self.third(f2, a, b)
        if c == d or d in self.neighbors(c):
            return False
        va, vb, vc, vd = (self.valence(x) for x in (a, b, c, d))
        if va <= 3 or vb <= 3:
            return False
        ta, tb, tc, td = (4 if self.boundary[x] else 6 for x in (a, b, c, d))
        before = (va - ta) ** 2 + (vb - tb) ** 2 + (vc - tc) ** 2 + (vd - td) ** 2
        after = (va - 1 - ta) ** 2 + (vb - 1 - tb) ** 2 + (vc + 1 - tc) ** 2 + (vd + 1 - td) ** 2
        if after >= before:
            return False
        P = self.pos
        olds = (_tri_normal(P[a], P[b], P[c]), _tri_normal(P[b], P[a], P[d]))
        news = (_tri_normal(P[a], P[d], P[c]), _tri_normal(P[d], P[b], P[c]))
        for nn in news:
            if _dot(nn, nn) <= 1e-30:
                return False
            for no in olds:
                if _dot(nn, no) <= 0:
                    return False
        q_old = min(_quality(P[a], P[b], P[c]), _quality(P[b], P[a], P[d]))
        q_new = min(_quality(P[a], P[d], P[c]), _quality(P[d], P[b], P[c]))
        if q_new < min(q_old, QUALITY_FLOOR):
            return False
        self.faces[f1] = [a, d, c]
        self.faces[f2] = [d, b, c]
        self.vf[a].discard(f2)
        self.vf[b].discard(f1)
        self.vf[c].add(f2)
        self.vf[d].add(f1)
        return True


def _edge_lengths(pos, edges):
    d = pos[edges[:, 0]] - pos[edges[:, 1]]
    return np.sqrt((d * d).sum(1))


def _flip_candidates(work: _Work):
    faces = work.live_faces()
    if len(faces) == 0:
        return []
    nv = len(work.pos)
    val = np.array([work.valence(v) for v in range(nv)])
    tgt = np.where(np.array(work.boundary), 4, 6)
    d = np.concatenate([faces[:, [0, 1, 2]], faces[:, [1, 2, 0]], faces[:, [2, 0, 1]]])
    s = np.sort(d[:, :2], axis=1)
    key = s[:, 0] * nv + s[:, 1]
    order = np.argsort(key, kind="stable")
    key, d = key[order], d[order]
    pair = np.flatnonzero(key[1:] == key[:-1])
    a, b = d[pair, 0], d[pair, 1]
    c, dd = d[pair, 2], d[pair + 1, 2]
    dev = lambda x, k: (val[x] + k - tgt[x]) ** 2  # noqa: E731
    gain = (dev(a, 0) + dev(b, 0) + dev(c, 0) + dev(dd, 0)
            - dev(a, -1) - dev(b, -1) - dev(c, 1) - dev(dd, 1))
    ok = gain > 0
    idx = np.flatnonzero(ok)
    idx = idx[np.lexsort((key[pair][idx], -gain[idx]))]
    return list(zip(a[idx].tolist(), b[idx].tolist()))


def tangential_smooth(vertices, faces, lam, fixed=None):
    """``v += lam * (I - n n^T)(centroid(1-ring) - v)``; ``fixed`` rows stay put."""
    nv = len(vertices)
    e = unique_edges(faces)
    A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                      shape=(nv, nv)).tocsr()
    deg = np.asarray(A.sum(1)).ravel()
    has = deg > 0
    cen = np.zeros_like(vertices)
    cen[has] = (A @ vertices)[has] / deg[has, None]
    delta = np.where(has[:, None], cen - vertices, 0.0)
    n = compute_vertex_normals(Mesh(vertices, faces))
    delta -= (delta * n).sum(1, keepdims=True) * n
    if fixed is not None:
        delta[fixed] = 0.0
    return vertices + lam * delta


# ------------------------------------------------------------------- driver

def _remap(W, keep, value):
    """Apply vertex provenance to one state entry."""
    from .train import AdamState  # local: train imports remesh

    if isinstance(value, AdamState):
        if value.m.ndim == 0 or value.m.shape[0] != W.shape[1]:
            return value
        step = np.where(keep >= 0, value.step[np.maximum(keep, 0)], 0) \
            if np.ndim(value.step) else value.step
        return AdamState(m=W @ value.m, v=W @ value.v, step=step)
    arr = np.asarray(value)
    if arr.ndim == 0 or arr.shape[0] != W.shape[1]:
        return value
    return W @ arr


def remesh_step(mesh: Mesh, state: dict | None, cfg: RemeshConfig, stats: RemeshStats | None = None):
    """One remeshing pass; returns ``(new_mesh, remapped_state)``.

    ``state`` maps names to per-vertex arrays or ``AdamState`` objects; rows
    are remapped to the new vertex set (moments averaged, step counters reset
    for created/merged vertices).  Entries that are not per-vertex pass
    through untouched.
    """
    check_manifold(mesh, fans=cfg.debug)
    stats = stats if stats is not None else RemeshStats()
    lt = cfg.target_edge
    hi, lo = cfg.split_factor * lt, cfg.collapse_factor * lt
    budget = cfg.max_ops_per_call
    work = _Work(mesh)

    # 1. split long edges, longest first
    edges = mesh.edges()
    ln = _edge_lengths(mesh.vertices, edges)
    cand = np.flatnonzero(ln > hi)
    cand = cand[np.lexsort((cand, -ln[cand]))]
    for a, b in edges[cand].tolist():
        if budget <= 0:
            break
        if work.shared(a, b) and _dist(work.pos[a], work.pos[b]) > hi:
            work.split(a, b)
            stats.splits += 1
            budget -= 1

    # 2. collapse short edges, shortest first
    faces = work.live_faces()
    pos = np.array(work.pos)
    edges = unique_edges(faces)
    ln = _edge_lengths(pos, edges)
    cand = np.flatnonzero(ln < lo)
    cand = cand[np.lexsort((cand, ln[cand]))]
    for a, b in edges[cand].tolist():
        if budget <= 0:
            break
        if work.dead[a] or work.dead[b] or _dist(work.pos[a], work.pos[b]) >= lo:
            continue
        if work.try_collapse(a, b, hi):
            stats.collapses += 1
            budget -= 1

    # 3. valence-improving flips
    for a, b in _flip_candidates(work):
        if budget <= 0:
            break
        if work.try_flip(a, b):
            stats.flips += 1
            budget -= 1

    # compact
    alive = np.array([not d for d in work.dead])
    faces = work.live_faces()
    used = np.zeros(len(alive), bool)
    used[faces.ravel()] = True
    alive &= used
    new_id = -np.ones(len(alive), np.int64)
    new_id[alive] = np.arange(alive.sum())
    faces = new_id[faces]
    pos = np.array(work.pos)[alive]

    # provenance matrix (new vertices x input vertices)
    rows, cols, vals = [], [], []
    keep = -np.ones(int(alive.sum()), np.int64)
    for new, old in enumerate(np.flatnonzero(alive).tolist()):
        wgt = work.weights[old]
        if wgt is None:
            rows.append(new)
            cols.append(old)
            vals.append(1.0)
            keep[new] = old
        else:
            for k, x in sorted(wgt.items()):
                rows.append(new)
                cols.append(k)
                vals.append(x)
    W = sp.csr_matrix((vals, (rows, cols)), shape=(len(pos), mesh.n_vertices))
    colors = W @ mesh.colors

    # 4. tangential smoothing
    bnd = np.array(work.boundary)[alive]
    pos = tangential_smooth(pos, faces, cfg.smooth_lambda, fixed=bnd)
    out = Mesh(pos, faces, colors)
    if cfg.debug:
        check_manifold(out)
        if out.euler_characteristic() != mesh.euler_characteristic():
            raise MeshError("remeshing changed the Euler characteristic")
    new_state = None
    if state is not None:
        new_state = {k: _remap(W, keep, v) for k, v in state.items()}
    return out, new_state


# ------------------------------------------------------------------ quality

@dataclass
class QualityReport:
    vertices: int
    edges: int
    faces: int
    euler: int
    min_quality: float
    mean_quality: float
    edge_min: float
    edge_mean: float
    edge_max: float
    edge_manifold: bool
    closed: bool
    oriented: bool
    vertex_manifold: bool
    edge_hist: np.ndarray = field(repr=False, default=None)
    edge_bins: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("edge_hist", "edge_bins")}


def triangle_quality(vertices, faces) -> np.ndarray:
    """``2 * inradius / circumradius`` per face (1 for equilateral)."""
    p = vertices[faces]
    la = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    lb = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    lc = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    s = 0.5 * (la + lb + lc)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 8 * area**2 / (s * la * lb * lc)
    return np.nan_to_num(q)


def mesh_quality_report(mesh: Mesh, bins: int = 20) -> QualityReport:
    edges, counts, consistent = edge_face_incidence(mesh.faces)
    ln = _edge_lengths(mesh.vertices, edges) if len(edges) else np.zeros(1)
    q = triangle_quality(mesh.vertices, mesh.faces) if mesh.n_faces else np.zeros(1)
    hist, bin_edges = np.histogram(ln, bins=bins)
    return QualityReport(
        vertices=mesh.n_vertices, edges=len(edges), faces=mesh.n_faces,
        euler=mesh.n_vertices - len(edges) + mesh.n_faces,
        min_quality=float(q.min()), mean_quality=float(q.mean()),
        edge_min=float(ln.min()), edge_mean=float(ln.mean()), edge_max=float(ln.max()),
        edge_manifold=bool((counts <= 2).all()), closed=bool((counts == 2).all()),
        oriented=bool(consistent), vertex_manifold=vertex_fans_ok(mesh.faces, mesh.n_vertices),
        edge_hist=hist, edge_bins=bin_edges)


def write_quality_csv(path, reports, iterations=None) -> None:
    """One row per report; ``iterations`` labels rows (defaults to 0..n-1)."""
    reports = list(reports)
    iterations = range(len(reports)) if iterations is None else iterations
    with open(path, "w", newline="") as fh:
        wr = None
        for it, rep in zip(iterations, reports):
            row = {"iter": it, **rep.row()}
            if wr is None:
                wr = csv.DictWriter(fh, fieldnames=list(row))
                wr.writeheader()
            wr.writerow(row)
