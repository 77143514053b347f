"""Mesh softening: offset layers, stop-gradient signed distances, alphas.

A base mesh is turned into ``N`` copies pushed along the (detached) vertex
normals.  Each layer vertex keeps its signed offset ``d``; the signed
distance used for alpha is recomputed against the *current* base vertex with
the layer vertex held constant, which is what lets alpha gradients move the
base geometry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .appearance import vertex_color
from .geometry import Mesh, compute_vertex_normals

ALPHA_MAX = 0.999
BETA_MIN = 1e-4


@dataclass
class AlphaParams:
    """Global sharpness parameter; ``beta = BETA_MIN + softplus(b)``."""

    b: float = 0.5413248546129181  # beta = 1.0

    @property
    def beta(self) -> float:
        return BETA_MIN + float(np.logaddexp(0.0, self.b))

    @property
    def dbeta_db(self) -> float:
        return float(0.5 * (1.0 + np.tanh(0.5 * self.b)))

    @classmethod
    def from_beta(cls, beta: float) -> "AlphaParams":
        x = beta - BETA_MIN
        if x <= 0:
            raise ValueError(f"beta must exceed {BETA_MIN}")
        return cls(b=float(x + np.log(-np.expm1(-x))))


@dataclass
class LayerSet:
    base: Mesh
    offsets: np.ndarray          # (N, V) signed offsets d
    layer_vertices: np.ndarray   # (N, V, 3), constants w.r.t. the base
    normals: np.ndarray          # (V, 3) detached snapshot
    signed_dists: np.ndarray | None = None  # (N, V)
    alphas: np.ndarray | None = None        # (N, V)
    colors: np.ndarray | None = None        # (V, 3) squashed, shared by layers

    @property
    def num_layers(self) -> int:
        return self.offsets.shape[0]

    @property
    def faces(self) -> np.ndarray:
        return self.base.faces


def layer_offsets(n: int, delta: float, rng: np.random.Generator) -> np.ndarray:
    """One stratified draw per layer over ``[-delta, delta]``."""
    if n < 1 or delta <= 0:
        raise ValueError("need n >= 1 and delta > 0")
    eps = 1e-3 * delta
    width = 2 * delta / n
    lo = -delta + np.arange(n) * width
    d = lo + rng.random(n) * width
    small = np.abs(d) < eps
    d[small] = np.where(d[small] < 0, -eps, eps)
    return d


def sample_layers(base: Mesh, n: int, delta: float, seed=None, *, offsets=None,
                  normals=None) -> LayerSet:
    """Offset ``base`` into ``n`` layers along its area-weighted normals.

    ``seed`` may be an int or a ``numpy.random.Generator`` (the training
    loop passes its stream so layers are redrawn every iteration).
    ``offsets`` forces the per-layer draws.
    """
    if offsets is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        offsets = layer_offsets(n, delta, rng)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(n)
    if normals is None:
        normals = compute_vertex_normals(base)
    d = np.repeat(offsets[:, None], base.n_vertices, axis=1)
    lv = base.vertices[None] + d[..., None] * normals[None]
    return LayerSet(base=base, offsets=d, layer_vertices=lv, normals=normals)


def signed_distance_forward(layers: LayerSet, base_vertices=None) -> np.ndarray:
    """``s = sign(d) * |v_layer - v_base|`` with the layer vertex constant.

    ``base_vertices`` substitutes moved base positions (finite-difference
    checks); by default the layer set's own base is used.
    """
    v0 = layers.base.vertices if base_vertices is None else base_vertices
    diff = layers.layer_vertices - v0[None]
    return np.sign(layers.offsets) * np.sqrt((diff * diff).sum(-1))


def signed_distance_backward(layers: LayerSet, dL_ds, base_vertices=None) -> np.ndarray:
    """Per-base-vertex position gradient from per-layer-vertex ``dL/ds``."""
    v0 = layers.base.vertices if base_vertices is None else base_vertices
    diff = layers.layer_vertices - v0[None]
    dist = np.sqrt((diff * diff).sum(-1, keepdims=True))
    ds_dv0 = -np.sign(layers.offsets)[..., None] * diff / dist
    return (np.asarray(dL_ds)[..., None] * ds_dv0).sum(0)


def _alpha_inside(s, beta):
    return (1.0 / beta) * (1.0 - 0.5 * np.exp(s / beta))


def _alpha_outside(s, beta):
    return (0.5 / beta) * np.exp(-s / beta)


def sdf_to_alpha_raw(s, beta):
    s = np.asarray(s, dtype=np.float64)
    inside = s < 0
    # each branch only sees its own half so exp never overflows
    return np.where(inside, _alpha_inside(np.minimum(s, 0.0), beta),
                    _alpha_outside(np.maximum(s, 0.0), beta))


def sdf_to_alpha(s, params: AlphaParams):
    return np.clip(sdf_to_alpha_raw(s, params.beta), 0.0, ALPHA_MAX)


def sdf_to_alpha_backward(s, params: AlphaParams, dL_dalpha):
    """Returns ``(dL/ds, dL/db)``; clamped entries contribute nothing."""
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(dL_dalpha, dtype=np.float64)
    beta = params.beta
    raw = sdf_to_alpha_raw(s, beta)
    live = (raw > 0.0) & (raw < ALPHA_MAX)
    inside = s < 0
    si = np.minimum(s, 0.0)
    so = np.maximum(s, 0.0)
    ei = np.exp(si / beta)
    eo = np.exp(-so / beta)
    da_ds = np.where(inside, -0.5 * ei / beta**2, -0.5 * eo / beta**2)
    da_dbeta = np.where(inside,
                        -1.0 / beta**2 + 0.5 * ei / beta**2 + 0.5 * si * ei / beta**3,
                        0.5 * eo / beta**2 * (so / beta - 1.0))
    dL_ds = np.where(live, g * da_ds, 0.0)
    dL_db = float(np.sum(np.where(live, g * da_dbeta, 0.0))) * params.dbeta_db
    return dL_ds, dL_db


def soften(base: Mesh, n: int, delta: float, params: AlphaParams, seed=None, *,
           offsets=None, normals=None) -> LayerSet:
    """Sample layers and fill in signed distances, alphas and colors."""
    layers = sample_layers(base, n, delta, seed, offsets=offsets, normals=normals)
    layers.signed_dists = signed_distance_forward(layers)
    layers.alphas = sdf_to_alpha(layers.signed_dists, params)
    layers.colors = vertex_color(base.colors)
    return layers


def refresh(layers: LayerSet, base_vertices, colors_raw, params: AlphaParams) -> LayerSet:
    """Re-evaluate signed distances/alphas/colors for moved base attributes.

    Layer geometry stays frozen (the stop-gradient view of the pipeline).
    """
    base = Mesh(base_vertices, layers.base.faces, colors_raw)
    out = LayerSet(base=base, offsets=layers.offsets, layer_vertices=layers.layer_vertices,
                   normals=layers.normals)
    out.signed_dists = signed_distance_forward(out)
    out.alphas = sdf_to_alpha(out.signed_dists, params)
    out.colors = vertex_color(colors_raw)
    return out
