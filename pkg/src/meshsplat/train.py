"""Losses, Adam, and the two-stage reconstruction loop.

Stage one optimizes an SDF on a tetrahedral grid, re-extracting the surface
every iteration.  At ``iters_dmtet`` the extracted mesh is frozen as the base
and stage two optimizes its vertices directly, remeshing as it goes.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .dmtet import (ConfigError, TetGrid, backprop_to_sdf, build_grid, init_sphere_sdf,
                    marching_tets, save_grid_state)
from .geometry import Image, Mesh, compute_vertex_normals, icosphere, save_obj, unique_edges
from .remesh import RemeshConfig, RemeshStats, remesh_step
from .soften import AlphaParams, soften
from .splat import GradientBuffer, render, render_backward

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss_total", "loss_img", "loss_mask", "loss_smooth", "verts",
                  "beta", "seconds"]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at iteration {iteration}"
                         + (f"; checkpoint written to {checkpoint}" if checkpoint else ""))
        self.iteration = iteration
        self.checkpoint = checkpoint


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    iters_total: int = 3000
    iters_dmtet: int = 1500
    remesh_period: int = 1
    layers: int = 5
    delta: float = 0.02
    dmtet_resolution: int = 48
    bbox_size: float = 2.5
    init_radius: float = 0.6
    target_edge: float = 0.05
    lr_positions: float = 2e-3
    lr_colors: float = 5e-2
    lr_sdf: float = 2e-3
    lr_b: float = 1e-4
    beta_init: float = 1.0
    lambda_img: float = 1.0
    lambda_mask: float = 0.5
    lambda_smooth: float = 0.01
    seed: int = 0
    checkpoint_period: int = 500
    soft_layers: bool = True
    log_time: bool = False

    def validate(self) -> None:
        if self.iters_total < 1:
            raise ConfigError("iters_total must be >= 1")
        # equality is allowed: it means no remesh stage
        if not 0 <= self.iters_dmtet <= self.iters_total:
            raise ConfigError("need 0 <= iters_dmtet <= iters_total")
        if self.remesh_period < 1:
            raise ConfigError("remesh_period must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        for name in ("delta", "bbox_size", "init_radius", "target_edge", "beta_init",
                     "lr_positions", "lr_colors", "lr_sdf", "lr_b"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("lambda_img", "lambda_mask", "lambda_smooth"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.dmtet_resolution < 2:
            raise ConfigError("dmtet_resolution must be >= 2")
        if self.checkpoint_period < 0:
            raise ConfigError("checkpoint_period must be >= 0")
        if 2 * self.init_radius >= self.bbox_size:
            raise ConfigError("initial sphere does not fit in the grid")

    def replace(self, **kw) -> "TrainConfig":
        out = dataclasses.replace(self, **kw)
        out.validate()
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, text: str):
    kind = type(getattr(TrainConfig(), key))
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_overrides(pairs, allowed_extra=()) -> tuple[dict, dict]:
    """Split ``key=value`` strings into TrainConfig fields and extra keys.

    Unknown keys raise ``ConfigError`` unless listed in ``allowed_extra``.
    """
    fields_, extra = {}, {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k in _FIELDS:
            fields_[k] = _coerce(k, v)
        elif k in allowed_extra:
            extra[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return fields_, extra


def read_config_text(text: str, allowed_extra=("scene",)) -> tuple[TrainConfig, dict]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    fields_, extra = parse_overrides(pairs, allowed_extra)
    cfg = TrainConfig(**fields_)
    cfg.validate()
    return cfg, extra


def load_config(path, allowed_extra=("scene",)) -> tuple[TrainConfig, dict]:
    return read_config_text(Path(path).read_text(), allowed_extra)


def format_config(cfg: TrainConfig, extra: dict | None = None) -> str:
    lines = [f"{k} = {v}" for k, v in sorted((extra or {}).items())]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path, extra: dict | None = None) -> None:
    Path(path).write_text(format_config(cfg, extra))


# ------------------------------------------------------------------ losses

@dataclass
class LossBreakdown:
    photometric: float
    mask: float
    smooth: float
    total: float

    @classmethod
    def combine(cls, cfg: TrainConfig, photometric, mask, smooth) -> "LossBreakdown":
        total = (cfg.lambda_img * photometric + cfg.lambda_mask * mask
                 + cfg.lambda_smooth * smooth)
        return cls(float(photometric), float(mask), float(smooth), float(total))


def _pixels(img) -> np.ndarray:
    return img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def photometric_loss(pred, gt):
    """Mean absolute error and its gradient ``sign(pred - gt) / (W*H*C)``."""
    p, g = _pixels(pred), _pixels(gt)
    if p.shape != g.shape:
        raise ValueError(f"image shape mismatch: {p.shape} vs {g.shape}")
    diff = p - g
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def mask_loss(opacity, gt_mask):
    """Mean squared error between opacity and a binary mask."""
    o, m = _pixels(opacity), _pixels(gt_mask)
    if o.size != m.size or (o.ndim == m.ndim and o.shape != m.shape):
        raise ValueError(f"mask shape mismatch: {o.shape} vs {m.shape}")
    diff = o - m.reshape(o.shape)
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def umbrella_operator(faces: np.ndarray, n_vertices: int):
    """Sparse ``L`` with ``(L v)_i = v_i - mean(neighbors of i)`` and a mask of
    vertices that have neighbors."""
    e = unique_edges(faces)
    A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                      shape=(n_vertices, n_vertices)).tocsr()
    deg = np.asarray(A.sum(1)).ravel()
    has = deg > 0
    inv = np.where(has, 1.0 / np.maximum(deg, 1), 0.0)
    L = sp.diags(has.astype(float)) - sp.diags(inv) @ A
    return L.tocsr(), has


def laplacian_smooth_loss(mesh: Mesh):
    """Mean of ``|v - centroid(1-ring)|^2`` over connected vertices, with gradient."""
    L, has = umbrella_operator(mesh.faces, mesh.n_vertices)
    n = int(has.sum())
    if n < mesh.n_vertices:
        log.debug("smoothness loss skips %d isolated vertices", mesh.n_vertices - n)
    if n == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    Lv = L @ mesh.vertices
    loss = float((Lv * Lv).sum() / n)
    return loss, (2.0 / n) * (L.T @ Lv)


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    """Adam moments; ``step`` is a scalar or one counter per leading row."""

    m: np.ndarray
    v: np.ndarray
    step: np.ndarray | int = 0

    @classmethod
    def like(cls, x, per_row: bool = False) -> "AdamState":
        x = np.asarray(x, dtype=np.float64)
        step = np.zeros(x.shape[0], np.int64) if per_row and x.ndim else 0
        return cls(np.zeros_like(x), np.zeros_like(x), step)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params, grads, state: AdamState, lr: float, name: str = "param"):
    """Bias-corrected Adam update; returns ``(new_params, state)`` (state is updated in place)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"{name}: shape mismatch {params.shape} / {grads.shape} / "
                         f"{state.m.shape}")
    if not np.isfinite(grads).all():
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.m = BETA1 * state.m + (1 - BETA1) * grads
    state.v = BETA2 * state.v + (1 - BETA2) * grads * grads
    if np.ndim(state.step):
        state.step = state.step + 1
        t = state.step.reshape((-1,) + (1,) * (params.ndim - 1)).astype(np.float64)
    else:
        state.step = state.step + 1
        t = float(state.step)
    mhat = state.m / (1 - BETA1 ** t)
    vhat = state.v / (1 - BETA2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + ADAM_EPS), state


# ------------------------------------------------------------------- loop

@dataclass
class IterationRecord:
    iter: int
    loss: LossBreakdown
    verts: int
    beta: float
    seconds: float

    def row(self, log_time: bool) -> list[str]:
        return [str(self.iter), repr(self.loss.total), repr(self.loss.photometric),
                repr(self.loss.mask), repr(self.loss.smooth), str(self.verts),
                repr(self.beta), repr(self.seconds) if log_time else "0"]


@dataclass
class TrainResult:
    mesh: Mesh
    metrics: list[IterationRecord]
    params: AlphaParams
    transition_mesh: Mesh | None = None
    seconds: float = 0.0
    peak_bytes: int = 0
    timings: dict = field(default_factory=dict)


@dataclass
class StepInfo:
    """Passed to the optional per-iteration callback."""

    iteration: int
    stage: str
    grads: GradientBuffer
    loss: LossBreakdown
    mesh: Mesh


def metrics_csv(records, log_time: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row(log_time))
    return buf.getvalue()


class _ViewSampler:
    """Shuffled round-robin: every view once per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.order = n, rng, []

    def next(self) -> int:
        if not self.order:
            self.order = self.rng.permutation(self.n).tolist()
        return self.order.pop(0)


def _init_grid(cfg: TrainConfig) -> TetGrid:
    h = 0.5 * cfg.bbox_size
    grid = build_grid(cfg.dmtet_resolution, ((-h,) * 3, (h,) * 3))
    init_sphere_sdf(grid, r=cfg.init_radius)
    grid.colors = np.zeros((len(grid.sdf), 3))
    return grid


def _forward_backward(mesh, view, cfg, params, layer_rng, timings):
    rgb, mask, cam = view
    if mesh.n_faces == 0:
        raise ConfigError("surface vanished: the current shape has no faces")
    normals = compute_vertex_normals(mesh)
    if cfg.soft_layers:
        layers = soften(mesh, cfg.layers, cfg.delta, params, layer_rng, normals=normals)
    else:
        # near-opaque single layer hugging the surface
        eps = 1e-3 * cfg.delta
        layers = soften(mesh, 1, cfg.delta, params, offsets=[-eps], normals=normals)
    t0 = time.perf_counter()
    out, state = render(layers, cam, return_state=True, timings=timings)
    timings["render"] = timings.get("render", 0.0) + time.perf_counter() - t0
    li, gi = photometric_loss(out.color, rgb)
    lm, gm = mask_loss(out.opacity, mask)
    ls, gs = laplacian_smooth_loss(mesh)
    loss = LossBreakdown.combine(cfg, li, lm, ls)
    if not math.isfinite(loss.total):
        return loss, None, state
    t0 = time.perf_counter()
    grads = render_backward(layers, cam, cfg.lambda_img * gi, cfg.lambda_mask * gm, params,
                            state)
    grads.d_positions = grads.d_positions + cfg.lambda_smooth * gs
    timings["backward_total"] = timings.get("backward_total", 0.0) + time.perf_counter() - t0
    return loss, grads, state


def _checkpoint(out_dir, it, mesh, grid=None):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"ckpt_{it:05d}.obj"
    save_obj(mesh, path)
    if grid is not None:
        save_grid_state(grid, out_dir / f"grid_{it:05d}.bin")
    return path


def train_loop(dataset, cfg: TrainConfig, out_dir=None,
               callback: Callable[[StepInfo], None] | None = None) -> TrainResult:
    """Run both stages and return the final mesh and per-iteration metrics.

    ``dataset`` needs a ``views`` list of ``(rgb Image, mask Image, Camera)``.
    With ``out_dir`` set, writes ``metrics.csv``, ``final.obj`` and periodic
    checkpoints there.
    """
    cfg.validate()
    views = list(dataset.views)
    if len(views) < 2:
        raise ConfigError("training needs at least two views")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    sampler = _ViewSampler(len(views), np.random.default_rng(seeds[0]))
    layer_rng = np.random.default_rng(seeds[1])
    params = AlphaParams.from_beta(cfg.beta_init)
    b_state = AdamState.like(0.0)
    rcfg = RemeshConfig(target_edge=cfg.target_edge)
    records: list[IterationRecord] = []
    timings: dict = {}
    peak = 0
    t_start = time.perf_counter()

    grid = None
    if cfg.iters_dmtet > 0:
        grid = _init_grid(cfg)
        sdf_state = AdamState.like(grid.sdf)
        gcol_state = AdamState.like(grid.colors)
        mesh = None
    else:
        mesh = icosphere(3, radius=cfg.init_radius)
        mesh.colors = np.zeros((mesh.n_vertices, 3))
    transition = None
    pos_state = col_state = None
    rstats = RemeshStats()

    for it in range(1, cfg.iters_total + 1):
        t_it = time.perf_counter()
        view = views[sampler.next()]
        if it <= cfg.iters_dmtet:
            stage = "dmtet"
            mesh, emap = marching_tets(grid)
            loss, grads, state = _forward_backward(mesh, view, cfg, params, layer_rng, timings)
            if grads is None:
                raise TrainingDiverged(it, _checkpoint(out_dir, it, mesh, grid))
            d_sdf, d_gcol = backprop_to_sdf(emap, grid, grads.d_positions, grads.d_colors)
            grads.d_sdf = d_sdf
            # mesh vertices are not leaves in this stage
            grads.d_positions = np.zeros_like(grads.d_positions)
            grid.sdf, _ = adam_step(grid.sdf, d_sdf, sdf_state, cfg.lr_sdf, "sdf")
            grid.colors, _ = adam_step(grid.colors, d_gcol, gcol_state, cfg.lr_colors,
                                       "grid_colors")
        else:
            stage = "mesh"
            if pos_state is None:
                if grid is not None:
                    # freeze the last extraction (colors already interpolated)
                    mesh, _ = marching_tets(grid)
                    transition = mesh.copy()
                pos_state = AdamState.like(mesh.vertices, per_row=True)
                col_state = AdamState.like(mesh.colors, per_row=True)
            if (it - cfg.iters_dmtet - 1) % cfg.remesh_period == 0:
                t0 = time.perf_counter()
                mesh, st = remesh_step(mesh, {"pos": pos_state, "col": col_state}, rcfg, rstats)
                pos_state, col_state = st["pos"], st["col"]
                timings["remesh"] = timings.get("remesh", 0.0) + time.perf_counter() - t0
            loss, grads, state = _forward_backward(mesh, view, cfg, params, layer_rng, timings)
            if grads is None:
                raise TrainingDiverged(it, _checkpoint(out_dir, it, mesh))
            grads.d_sdf = None
            verts, _ = adam_step(mesh.vertices, grads.d_positions, pos_state,
                                 cfg.lr_positions, "positions")
            cols, _ = adam_step(mesh.colors, grads.d_colors, col_state, cfg.lr_colors,
                                "colors")
            mesh = Mesh(verts, mesh.faces, cols)
        new_b, _ = adam_step(np.array(params.b), np.array(grads.d_beta), b_state, cfg.lr_b, "b")
        params = AlphaParams(b=float(new_b))
        peak = max(peak, state.nbytes())
        if callback is not None:
            callback(StepInfo(it, stage, grads, loss, mesh))
        records.append(IterationRecord(it, loss, mesh.n_vertices, params.beta,
                                       time.perf_counter() - t_it))
        if cfg.checkpoint_period and it % cfg.checkpoint_period == 0:
            _checkpoint(out_dir, it, mesh, grid if stage == "dmtet" else None)

    if cfg.iters_dmtet == cfg.iters_total:
        # no remesh stage: return the extraction of the final SDF
        mesh, _ = marching_tets(grid)
        transition = mesh.copy()
    elapsed = time.perf_counter() - t_start
    log.info("trained %d iterations in %.1fs (%s)", cfg.iters_total, elapsed, rstats)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(records, cfg.log_time))
        save_obj(mesh, out / "final.obj")
    return TrainResult(mesh, records, params, transition, elapsed, peak, timings)
