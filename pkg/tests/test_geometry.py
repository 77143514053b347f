import numpy as np
import pytest

from meshsplat.geometry import (Camera, Image, Mesh, MeshError, ObjParseError, box_mesh,
                                compute_vertex_normals, icosphere, load_cameras, load_obj,
                                look_at, project, ray_triangle_intersect,
                                ray_triangle_intersect_many, read_ppm, save_cameras, save_obj,
                                torus_mesh, unproject, write_ppm)


def identity_camera(res=128, f=100.0, c=64.0):
    return Camera(np.eye(3), np.zeros(3), (f, f), (c, c), (res, res), 0.01, 100.0)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# ------------------------------------------------------------------ mesh

def test_mesh_rejects_out_of_range_and_repeated_indices():
    with pytest.raises(MeshError, match="7"):
        Mesh(np.zeros((3, 3)), [[0, 1, 7]])
    with pytest.raises(MeshError):
        Mesh(np.eye(3), [[0, 1, 1]])


def test_degenerate_faces_flagged():
    m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert m.degenerate_faces().tolist() == [True, False]


# --------------------------------------------------------------- normals

def test_cube_corner_normal_is_diagonal():
    cube = box_mesh(0.5)
    n = compute_vertex_normals(cube)
    corner = np.flatnonzero(np.all(np.isclose(cube.vertices, 0.5), axis=1))[0]
    np.testing.assert_allclose(n[corner], np.ones(3) / np.sqrt(3), atol=1e-12)


def test_icosphere_normals_follow_position():
    sphere = icosphere(3)
    n = compute_vertex_normals(sphere)
    radial = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    ang = np.arccos(np.clip((n * radial).sum(1), -1, 1))
    assert ang.max() < 0.05
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_collinear_face_vertices_are_flagged():
    m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    n, flags = compute_vertex_normals(m, return_flags=True)
    assert flags.all()
    np.testing.assert_array_equal(n, np.tile([0.0, 0.0, 1.0], (3, 1)))


# --------------------------------------------------------------- camera

def test_project_on_axis_and_offset_points():
    cam = identity_camera()
    assert project(cam, [0, 0, 2]) == (64.0, 64.0, 2.0)
    u, v, z = project(cam, [0.5, 0, 2])
    assert (u, v, z) == (89.0, 64.0, 2.0)


def test_project_matches_homogeneous_matrix_pipeline():
    rng = np.random.default_rng(3)
    for _ in range(200):
        R = random_rotation(rng)
        t = rng.normal(size=3)
        f = rng.uniform(50, 300, 2)
        c = rng.uniform(0, 128, 2)
        cam = Camera(R, t, f, c, (128, 128))
        p = rng.normal(size=3) * 3
        P = np.zeros((3, 4))
        P[:, :3] = np.array([[f[0], 0, c[0]], [0, f[1], c[1]], [0, 0, 1]]) @ R
        P[:, 3] = np.array([[f[0], 0, c[0]], [0, f[1], c[1]], [0, 0, 1]]) @ t
        h = P @ np.append(p, 1.0)
        u, v, z = project(cam, p)
        if abs(z) < 1e-3:
            continue
        np.testing.assert_allclose([u, v], h[:2] / h[2], rtol=1e-9, atol=1e-9)
        assert abs(z - h[2]) < 1e-9


def test_unproject_inverts_project():
    rng = np.random.default_rng(4)
    cam = Camera(random_rotation(rng), rng.normal(size=3), (120, 110), (60, 70), (128, 128))
    pts = cam.center + rng.normal(size=(100, 3))
    u, v, z = project(cam, pts)
    keep = z > cam.near
    back = unproject(cam, u[keep], v[keep], z[keep])
    np.testing.assert_allclose(back, pts[keep], atol=1e-9)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(np.ones((3, 3)), np.zeros(3), (1, 1), (0, 0), (4, 4))
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), (1, 1), (0, 0), (4, 4), near=2.0, far=1.0)


def test_look_at_centers_target():
    cam = look_at([3, 1, 2], [0.1, 0.2, 0.3], resolution=(64, 48))
    u, v, z = project(cam, [0.1, 0.2, 0.3])
    assert abs(u - 32) < 1e-9 and abs(v - 24) < 1e-9 and z > 0


def test_camera_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    cams = [Camera(random_rotation(rng), rng.normal(size=3), (100.5, 99.25), (31.5, 30.0),
                   (64, 60), 0.05, 50.0) for _ in range(3)]
    save_cameras(cams, tmp_path / "cameras.txt")
    line = (tmp_path / "cameras.txt").read_text().splitlines()[0].split()
    assert len(line) == 20 and line[:6] == ["100.5", "99.25", "31.5", "30.0", "64", "60"]
    back = load_cameras(tmp_path / "cameras.txt")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert (a.focal, a.principal, a.resolution, a.near, a.far) == \
            (b.focal, b.principal, b.resolution, b.near, b.far)


# ------------------------------------------------------- ray / triangle

def test_axis_ray_hits_triangle():
    tri = np.array([[-1, -1, 2], [1, -1, 2], [0, 1, 2]], float)
    t, bary = ray_triangle_intersect([0, 0, 0], [0, 0, 1], tri)
    assert t == pytest.approx(2.0)
    np.testing.assert_allclose(bary @ tri, [0, 0, 2], atol=1e-12)
    assert abs(bary.sum() - 1) < 1e-12


def test_parallel_ray_misses():
    tri = np.array([[-1, -1, 2], [1, -1, 2], [0, 1, 2]], float)
    assert ray_triangle_intersect([0, 0, 0], [1, 0, 0], tri) is None


def _plane_oracle(o, d, tri):
    """Plane intersection, then inside test by same-side half-plane signs."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    den = n @ d
    if abs(den) < 1e-9 * np.linalg.norm(n):
        return None
    t = n @ (a - o) / den
    if t <= 0:
        return None
    p = o + t * d
    s = [np.cross(q1 - q0, p - q0) @ n for q0, q1 in ((a, b), (b, c), (c, a))]
    if min(s) >= 0 or max(s) <= 0:
        return t
    return None


def test_random_rays_agree_with_plane_oracle():
    rng = np.random.default_rng(6)
    agree = 0
    checked = 0
    for _ in range(10000):
        tri = rng.normal(size=(3, 3))
        o = rng.normal(size=3) * 2
        target = tri.mean(0) + rng.normal(size=3) * 0.8
        d = target - o
        d /= np.linalg.norm(d)
        got = ray_triangle_intersect(o, d, tri)
        ref = _plane_oracle(o, d, tri)
        # skip rays grazing an edge where the two tolerance rules can disagree
        _, _, bary = ray_triangle_intersect_many(o, d[None], tri)
        if np.abs(bary).min() < 1e-6:
            continue
        checked += 1
        if got is None:
            assert ref is None
        else:
            assert ref is not None and abs(got[0] - ref) < 1e-9
            hit = o + got[0] * d
            assert np.linalg.norm(hit - got[1] @ tri) < 1e-7
        agree += 1
    assert checked > 9000 and agree == checked


def test_vectorized_intersection_matches_scalar():
    rng = np.random.default_rng(7)
    tri = rng.normal(size=(3, 3))
    o = np.array([0.0, 0.0, -4.0])
    dirs = rng.normal(size=(500, 3)) * [0.3, 0.3, 1] + [0, 0, 1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hit, t, bary = ray_triangle_intersect_many(o, dirs, tri)
    for k in range(len(dirs)):
        one = ray_triangle_intersect(o, dirs[k], tri)
        assert (one is not None) == bool(hit[k])
        if one is not None:
            assert one[0] == pytest.approx(t[k], abs=1e-12)


# ------------------------------------------------------------------ OBJ

def test_obj_round_trip_cube(tmp_path):
    cube = box_mesh(0.5)
    assert cube.n_faces == 12
    cube.colors = np.random.default_rng(0).normal(size=cube.vertices.shape)
    save_obj(cube, tmp_path / "c.obj")
    back = load_obj(tmp_path / "c.obj")
    np.testing.assert_array_equal(back.faces, cube.faces)
    assert np.abs(back.vertices - cube.vertices).max() < 1e-9
    np.testing.assert_allclose(back.colors, cube.colors, atol=1e-6)


def test_obj_face_index_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 99\n")
    with pytest.raises(MeshError, match="99"):
        load_obj(p)


@pytest.mark.parametrize("text, line", [
    ("v 0 0 0\nv 1 0\n", 2),
    ("v 0 0 0\nvc 1 0 0\n", 2),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", 5),
    ("v 0 0 x\n", 1),
])
def test_obj_parse_errors_carry_line_numbers(tmp_path, text, line):
    p = tmp_path / "bad.obj"
    p.write_text(text)
    with pytest.raises(ObjParseError) as err:
        load_obj(p)
    assert err.value.lineno == line


def test_obj_negative_indices_and_comments(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    assert load_obj(p).faces.tolist() == [[0, 1, 2]]


def test_torus_obj_has_zero_euler_characteristic(tmp_path):
    from meshsplat.harness import make_shape

    save_obj(make_shape("torus"), tmp_path / "t.obj")
    assert load_obj(tmp_path / "t.obj").euler_characteristic() == 0
    assert torus_mesh(0.6, 0.2, 12, 8).euler_characteristic() == 0


# ---------------------------------------------------------------- images

def test_ppm_round_trip_with_and_without_sidecar(tmp_path):
    rng = np.random.default_rng(8)
    data = rng.random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", Image(data), sidecar=True)
    exact = read_ppm(tmp_path / "a.ppm")
    np.testing.assert_allclose(exact.data, data, atol=1e-7)
    coarse = read_ppm(tmp_path / "a.ppm", prefer_sidecar=False)
    assert np.abs(coarse.data - data).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_mask_image_round_trip(tmp_path):
    mask = (np.arange(12).reshape(3, 4) % 2).astype(float)
    write_ppm(tmp_path / "m.ppm", Image(mask), sidecar=True)
    back = read_ppm(tmp_path / "m.ppm", channels=1)
    assert back.channels == 1
    np.testing.assert_array_equal(back.data[..., 0], mask)


def test_image_rejects_non_finite():
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 3), np.nan))
