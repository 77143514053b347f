import numpy as np
import pytest

from meshsplat.dmtet import ConfigError, load_grid_state, marching_tets
from meshsplat.geometry import Image, Mesh, icosphere
from meshsplat.harness import make_dataset
from meshsplat.soften import AlphaParams, soften
from meshsplat.splat import render
from meshsplat.train import (METRICS_HEADER, AdamState, LossBreakdown, TrainConfig,
                             TrainingDiverged, adam_step, format_config, laplacian_smooth_loss,
                             load_config, mask_loss, metrics_csv, parse_overrides,
                             photometric_loss, read_config_text, train_loop)


def tiny_cfg(**kw):
    base = dict(iters_total=24, iters_dmtet=12, dmtet_resolution=12, target_edge=0.15,
                checkpoint_period=0)
    base.update(kw)
    return TrainConfig().replace(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset("sphere", 4, 32, 0)


# ------------------------------------------------------------------ losses

def test_photometric_examples():
    a = np.random.default_rng(0).random((4, 5, 3))
    assert photometric_loss(a, a)[0] == 0.0
    assert photometric_loss(np.ones((4, 5, 3)), np.zeros((4, 5, 3)))[0] == 1.0
    with pytest.raises(ValueError):
        photometric_loss(np.ones((4, 5, 3)), np.ones((5, 4, 3)))


def test_photometric_gradient_fd():
    rng = np.random.default_rng(1)
    pred, gt = rng.random((6, 7, 3)), rng.random((6, 7, 3))
    _, g = photometric_loss(Image(pred), Image(gt))
    for _ in range(5):
        idx = tuple(rng.integers(0, s) for s in pred.shape)
        h = 0.1 * abs(pred[idx] - gt[idx])
        p1, p2 = pred.copy(), pred.copy()
        p1[idx] += h
        p2[idx] -= h
        fd = (photometric_loss(p1, gt)[0] - photometric_loss(p2, gt)[0]) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-6 * abs(fd)


def test_mask_examples_and_gradient():
    m = np.ones((4, 4, 1))
    assert mask_loss(m, m)[0] == 0.0
    assert mask_loss(np.full((4, 4, 1), 0.5), m)[0] == 0.25
    rng = np.random.default_rng(2)
    o = rng.random((4, 4, 1))
    gm = (rng.random((4, 4, 1)) > 0.5).astype(float)
    _, g = mask_loss(o, gm)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 0), (3, 3, 0)]:
        o1, o2 = o.copy(), o.copy()
        o1[idx] += h
        o2[idx] -= h
        fd = (mask_loss(o1, gm)[0] - mask_loss(o2, gm)[0]) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-6 * max(abs(fd), 1e-3)
    with pytest.raises(ValueError):
        mask_loss(np.ones((4, 4, 1)), np.ones((3, 4, 1)))


def grid_patch(n=6):
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    v = np.c_[xs.ravel(), ys.ravel(), np.zeros(n * n)]
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces += [[a, b, c], [a, c, d]]
    return Mesh(v, np.array(faces))


def test_flat_grid_interior_has_zero_smoothness():
    m = grid_patch()
    from meshsplat.train import umbrella_operator

    L, _ = umbrella_operator(m.faces, m.n_vertices)
    Lv = L @ m.vertices
    interior = [(i * 6 + j) for i in range(1, 5) for j in range(1, 5)]
    # the diagonal split makes every interior 1-ring symmetric about the vertex
    assert np.abs(Lv[interior]).max() < 1e-12


def test_smoothness_gradient_fd_with_displaced_vertex():
    m = grid_patch()
    m.vertices[14, 2] = 0.3
    loss, g = laplacian_smooth_loss(m)
    assert loss > 0
    h = 1e-6
    rng = np.random.default_rng(3)
    for v in [14, 8, 20, 0] + rng.integers(0, m.n_vertices, 4).tolist():
        for k in range(3):
            p, q = m.copy(), m.copy()
            p.vertices[v, k] += h
            q.vertices[v, k] -= h
            fd = (laplacian_smooth_loss(p)[0] - laplacian_smooth_loss(q)[0]) / (2 * h)
            assert abs(fd - g[v, k]) <= 1e-6 * max(abs(fd), 1e-4)


def test_isolated_vertices_are_skipped():
    m = grid_patch(3)
    m2 = Mesh(np.r_[m.vertices, [[9.0, 9.0, 9.0]]], m.faces)
    assert laplacian_smooth_loss(m2)[0] == pytest.approx(laplacian_smooth_loss(m)[0])
    assert not laplacian_smooth_loss(m2)[1][-1].any()


def test_smoothness_decreases_with_sphere_refinement():
    vals = [laplacian_smooth_loss(icosphere(k))[0] for k in (2, 3, 4)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_loss_breakdown_combines_weights():
    cfg = TrainConfig(lambda_img=2.0, lambda_mask=0.5, lambda_smooth=0.1)
    lb = LossBreakdown.combine(cfg, 1.0, 2.0, 3.0)
    assert lb.total == pytest.approx(2.0 + 1.0 + 0.3)


# --------------------------------------------------------------- optimizer

def test_adam_constant_gradient_step_tends_to_lr():
    x = np.zeros(3)
    st = AdamState.like(x)
    g = np.array([0.5, -2.0, 1e-3])
    for _ in range(5000):
        prev = x.copy()
        x, st = adam_step(x, g, st, 0.01)
    np.testing.assert_allclose(x - prev, -0.01 * np.sign(g), rtol=1e-3)


def test_adam_zero_gradient_leaves_params():
    x = np.arange(4.0)
    st = AdamState.like(x)
    y, _ = adam_step(x, np.zeros(4), st, 0.1)
    np.testing.assert_array_equal(x, y)


def test_adam_quadratic_bowl():
    x = np.ones(3)
    st = AdamState.like(x)
    for _ in range(500):
        x, st = adam_step(x, 2 * x, st, 0.1)
    assert np.linalg.norm(x) < 1e-3


def test_adam_rejects_non_finite_with_name():
    x = np.zeros(2)
    with pytest.raises(FloatingPointError, match="positions"):
        adam_step(x, np.array([1.0, np.inf]), AdamState.like(x), 0.1, "positions")


def test_adam_per_row_counters():
    x = np.zeros((3, 2))
    st = AdamState.like(x, per_row=True)
    st.step = np.array([0, 10, 100])
    x, st = adam_step(x, np.ones((3, 2)), st, 0.1)
    assert st.step.tolist() == [1, 11, 101]
    # first step of a fresh row moves by lr exactly
    np.testing.assert_allclose(x[0], -0.1, rtol=1e-6)


# ------------------------------------------------------------------ config

def test_config_defaults_validate():
    cfg = TrainConfig()
    cfg.validate()
    assert (cfg.iters_dmtet, cfg.iters_total, cfg.dmtet_resolution) == (1500, 3000, 48)
    assert (cfg.lambda_img, cfg.lambda_mask, cfg.lambda_smooth) == (1.0, 0.5, 0.01)


@pytest.mark.parametrize("kw", [dict(iters_dmtet=10, iters_total=5), dict(lr_sdf=0.0),
                                dict(lambda_mask=-1.0), dict(layers=0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        TrainConfig().replace(**kw)


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig().replace(seed=7, delta=0.03, soft_layers=False)
    text = format_config(cfg, {"scene": "data/blob"})
    back, extra = read_config_text(text)
    assert back == cfg and extra == {"scene": "data/blob"}
    p = tmp_path / "c.txt"
    p.write_text("# comment\niters_total = 10  # trailing\niters_dmtet=5\n")
    cfg2, _ = load_config(p)
    assert (cfg2.iters_total, cfg2.iters_dmtet) == (10, 5)


def test_unknown_config_key_is_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        parse_overrides(["bogus=1"])
    with pytest.raises(ConfigError):
        read_config_text("layers = five\n")


# -------------------------------------------------------------------- loop

def test_metrics_csv_schema(tiny_data, tmp_path):
    res = train_loop(tiny_data, tiny_cfg(), tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[0] == "iter,loss_total,loss_img,loss_mask,loss_smooth,verts,beta,seconds"
    assert len(lines) == 25
    assert all(line.endswith(",0") for line in lines[1:])
    assert (tmp_path / "final.obj").exists()
    assert metrics_csv(res.metrics, log_time=True).splitlines()[1].split(",")[-1] != "0"


def test_schedule_boundary_returns_last_extraction(tiny_data, tmp_path):
    from meshsplat.dmtet import build_grid

    cfg = tiny_cfg(iters_total=8, iters_dmtet=8, checkpoint_period=8)
    res = train_loop(tiny_data, cfg, tmp_path)
    saved = load_grid_state(tmp_path / "grid_00008.bin")
    g = build_grid(saved.resolution, saved.bbox)
    g.sdf = saved.sdf
    m, _ = marching_tets(g)
    np.testing.assert_array_equal(m.faces, res.mesh.faces)
    np.testing.assert_array_equal(m.vertices, res.mesh.vertices)


def test_same_seed_gives_identical_metrics(tiny_data, tmp_path):
    a = train_loop(tiny_data, tiny_cfg(), tmp_path / "a")
    b = train_loop(tiny_data, tiny_cfg(), tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/final.obj").read_bytes() == (tmp_path / "b/final.obj").read_bytes()
    c = train_loop(tiny_data, tiny_cfg(seed=1))
    assert metrics_csv(c.metrics) != metrics_csv(a.metrics)
    assert a.mesh.n_vertices == b.mesh.n_vertices


def test_divergence_guard_writes_checkpoint(tiny_data, tmp_path):
    class Bad:
        views = [(np.full((32, 32, 3), np.inf), m, c) for _, m, c in tiny_data.views]

    with pytest.raises(TrainingDiverged) as err:
        train_loop(Bad(), tiny_cfg(), tmp_path)
    assert err.value.iteration == 1
    assert err.value.checkpoint.exists()
    assert (tmp_path / "grid_00001.bin").exists()


def test_needs_two_views(tiny_data):
    class One:
        views = tiny_data.views[:1]

    with pytest.raises(ConfigError):
        train_loop(One(), tiny_cfg())


def test_parameter_discipline_and_transition(tiny_data):
    seen = {}

    def cb(info):
        if info.stage == "dmtet":
            assert not info.grads.d_positions.any()
            assert info.grads.d_sdf is not None and info.grads.d_sdf.any()
        else:
            assert info.grads.d_sdf is None
            assert info.grads.d_positions.any()
        seen.setdefault(info.stage, []).append(info.iteration)

    train_loop(tiny_data, tiny_cfg(), callback=cb)
    assert seen["dmtet"] == list(range(1, 13)) and seen["mesh"] == list(range(13, 25))


def test_stage_transition_preserves_render(tiny_data):
    # the warmup trajectory does not depend on what follows it
    only = train_loop(tiny_data, tiny_cfg(iters_total=12, iters_dmtet=12))
    both = train_loop(tiny_data, tiny_cfg(iters_total=13, iters_dmtet=12))
    a, b = only.mesh, both.transition_mesh
    np.testing.assert_array_equal(a.faces, b.faces)
    params = AlphaParams.from_beta(1.0)
    for cam in tiny_data.cameras:
        ia = render(soften(a, 5, 0.02, params, 0), cam)
        ib = render(soften(b, 5, 0.02, params, 0), cam)
        assert np.abs(ia.color.data - ib.color.data).max() <= 1e-6
        assert np.abs(ia.opacity.data - ib.opacity.data).max() <= 1e-6


def test_transition_mesh_matches_grid_checkpoint(tiny_data, tmp_path):
    from meshsplat.dmtet import build_grid

    res = train_loop(tiny_data, tiny_cfg(checkpoint_period=12), tmp_path)
    saved = load_grid_state(tmp_path / "grid_00012.bin")
    g = build_grid(saved.resolution, saved.bbox)
    g.sdf = saved.sdf
    m, _ = marching_tets(g)
    np.testing.assert_array_equal(m.vertices, res.transition_mesh.vertices)
    np.testing.assert_array_equal(m.faces, res.transition_mesh.faces)
    assert (tmp_path / "ckpt_00024.obj").exists()


def test_single_layer_mode_runs(tiny_data):
    res = train_loop(tiny_data, tiny_cfg(soft_layers=False, iters_total=6, iters_dmtet=3))
    assert len(res.metrics) == 6 and np.isfinite(res.mesh.vertices).all()


def test_loss_trends_down_on_sphere():
    data = make_dataset("sphere", 8, 48, 0, albedo=(0.8, 0.4, 0.2))
    cfg = TrainConfig().replace(iters_total=300, iters_dmtet=200, dmtet_resolution=24,
                                target_edge=0.1, checkpoint_period=0)
    res = train_loop(data, cfg)
    tot = np.array([r.loss.total for r in res.metrics])
    assert tot[-100:].mean() < tot[:100].mean()
