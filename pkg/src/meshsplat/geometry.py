"""Core mesh, camera and image types plus the exact geometric helpers.

Conventions
-----------
* Face indices are 0-based in memory; OBJ files are 1-based.
* Cameras are OpenCV-style pinholes: ``p_cam = R @ p_world + t``, +z looks
  forward, +x right, +y down in the image.
* Pixel ``(i, j)`` (column, row) has its center at ``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

AREA_EPS = 1e-12
BARY_EPS = 1e-9


class MeshError(ValueError):
    """Structurally invalid mesh (bad indices, repeated vertices, ...)."""


class ObjParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Mesh:
    """Indexed triangle mesh with raw (pre-logistic) per-vertex colors."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.zeros_like(self.vertices)
        else:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != len(self.vertices):
            raise MeshError("colors and vertices differ in length")
        if len(self.faces):
            bad = (self.faces < 0) | (self.faces >= len(self.vertices))
            if bad.any():
                raise MeshError(f"face index {int(self.faces[bad][0])} out of range "
                                f"for {len(self.vertices)} vertices")
            f = self.faces
            if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
                raise MeshError("face references the same vertex twice")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy(), self.colors.copy())

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self.vertices, self.faces), axis=1)

    def degenerate_faces(self) -> np.ndarray:
        """Boolean mask of faces with area below ``AREA_EPS``."""
        return self.face_areas() < AREA_EPS

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(E, 2)`` index pairs."""
        return unique_edges(self.faces)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces


def unique_edges(faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    n = int(e.max()) + 1
    keys = np.unique(e[:, 0] * n + e[:, 1])
    return np.stack([keys // n, keys % n], axis=1)


def _face_cross(vertices, faces):
    v0 = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)


def compute_vertex_normals(mesh: Mesh, return_flags: bool = False):
    """Area-weighted unit vertex normals.

    Vertices whose weighted sum vanishes (isolated, degenerate neighborhoods
    or exact cancellation) get ``(0, 0, 1)``; with ``return_flags`` a boolean
    mask of those vertices is returned as well.
    """
    acc = np.zeros((mesh.n_vertices, 3))
    if mesh.n_faces:
        cr = np.repeat(_face_cross(mesh.vertices, mesh.faces), 3, axis=0)
        idx = mesh.faces.ravel()
        for c in range(3):
            acc[:, c] = np.bincount(idx, weights=cr[:, c], minlength=mesh.n_vertices)
    norm = np.linalg.norm(acc, axis=1)
    flagged = norm <= 1e-15
    normals = np.empty_like(acc)
    ok = ~flagged
    normals[ok] = acc[ok] / norm[ok, None]
    normals[flagged] = (0.0, 0.0, 1.0)
    if return_flags:
        return normals, flagged
    return normals


@dataclass
class Camera:
    rotation: np.ndarray
    translation: np.ndarray
    focal: tuple[float, float]
    principal: tuple[float, float]
    resolution: tuple[int, int]
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = (float(self.focal[0]), float(self.focal[1]))
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not 0 < self.near < self.far:
            raise ValueError("camera needs 0 < near < far")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def intrinsics(self) -> np.ndarray:
        fx, fy = self.focal
        cx, cy = self.principal
        return np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])

    def pixel_rays(self):
        """World-space origin and unit directions through every pixel center.

        Returns ``(origin (3,), dirs (H, W, 3))``.
        """
        w, h = self.resolution
        fx, fy = self.focal
        cx, cy = self.principal
        u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        d_cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
        d = d_cam @ self.rotation  # R^T applied row-wise
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.center, d

    def to_line(self) -> str:
        vals = [*self.focal, *self.principal, *self.resolution, self.near, self.far,
                *self.rotation.ravel(), *self.translation]
        return " ".join(_fmt(v) for v in vals)

    @classmethod
    def from_line(cls, line: str) -> "Camera":
        vals = line.split()
        if len(vals) != 20:
            raise ValueError(f"camera line needs 20 fields, got {len(vals)}")
        x = [float(s) for s in vals]
        return cls(rotation=np.array(x[8:17]).reshape(3, 3), translation=x[17:20],
                   focal=(x[0], x[1]), principal=(x[2], x[3]),
                   resolution=(int(x[4]), int(x[5])), near=x[6], far=x[7])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, fov_deg=50.0, resolution=(128, 128),
            near=0.01, far=100.0) -> Camera:
    """Pinhole camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    w, h = resolution
    f = 0.5 * w / np.tan(np.radians(fov_deg) / 2)
    return Camera(R, -R @ eye, (f, f), (w / 2, h / 2), (w, h), near, far)


def project(camera: Camera, point):
    """Project world point(s) to ``(u, v, z)``; ``z <= 0`` is returned as is."""
    p = np.asarray(point, dtype=np.float64)
    pc = p @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal[0] * pc[..., 0] / z + camera.principal[0]
        v = camera.focal[1] * pc[..., 1] / z + camera.principal[1]
    return u, v, z


def unproject(camera: Camera, u, v, z):
    """Inverse of :func:`project` for points in front of the camera."""
    u, v, z = np.asarray(u, float), np.asarray(v, float), np.asarray(z, float)
    x = (u - camera.principal[0]) / camera.focal[0] * z
    y = (v - camera.principal[1]) / camera.focal[1] * z
    pc = np.stack([x, y, z], axis=-1)
    return (pc - camera.translation) @ camera.rotation


def ray_triangle_intersect(origin, direction, tri, eps: float = BARY_EPS):
    """Moller-Trumbore intersection of one ray with one triangle.

    Returns ``(t, bary)`` with ``bary`` the weights of ``tri[0..2]``, or
    ``None`` for parallel rays, misses and hits behind the origin.
    """
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    a, b, c = (np.asarray(x, float) for x in tri)
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)
    det = e1 @ pvec
    scale = np.linalg.norm(e1) * np.linalg.norm(e2)
    if scale == 0 or abs(det) <= 1e-14 * scale:
        return None
    inv = 1.0 / det
    tvec = o - a
    u = (tvec @ pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (d @ qvec) * inv
    w0 = 1.0 - u - v
    if min(u, v, w0) < -eps or max(u, v, w0) > 1 + eps:
        return None
    t = (e2 @ qvec) * inv
    if t <= 0:
        return None
    return float(t), np.array([w0, u, v])


def ray_triangle_intersect_many(origin, dirs, tri, eps: float = BARY_EPS):
    """Vectorized :func:`ray_triangle_intersect` for one origin, many rays.

    Returns ``(hit, t, bary)`` arrays; entries where ``hit`` is False are
    meaningless.
    """
    o = np.asarray(origin, float)
    d = np.asarray(dirs, float)
    a, b, c = (np.asarray(x, float) for x in tri)
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)
    det = pvec @ e1
    scale = np.linalg.norm(e1) * np.linalg.norm(e2)
    tvec = o - a
    qvec = np.cross(tvec, e1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        u = (pvec @ tvec) * inv
        v = (d @ qvec) * inv
        t = (e2 @ qvec) * inv
    w0 = 1.0 - u - v
    bary = np.stack([w0, u, v], axis=-1)
    hit = (np.abs(det) > 1e-14 * scale) & (scale > 0)
    hit &= (bary.min(axis=-1) >= -eps) & (bary.max(axis=-1) <= 1 + eps) & (t > 0)
    return hit, t, bary


# --------------------------------------------------------------------- OBJ IO

def save_obj(mesh: Mesh, path, with_colors: bool = True) -> None:
    """Write an OBJ; colors go out logistic-squashed as ``v x y z r g b``."""
    lines = []
    if with_colors:
        cols = 1.0 / (1.0 + np.exp(-mesh.colors))
        for p, c in zip(mesh.vertices, cols):
            lines.append("v %.9g %.9g %.9g %.9g %.9g %.9g" % (*p, *c))
    else:
        for p in mesh.vertices:
            lines.append("v %.9g %.9g %.9g" % tuple(p))
    for f in mesh.faces + 1:
        lines.append("f %d %d %d" % tuple(f))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, cols, faces = [], [], []
    has_color = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            key = tok[0]
            if key == "v":
                if len(tok) not in (4, 7):
                    raise ObjParseError(lineno, "vertex needs 3 or 6 numbers")
                try:
                    nums = [float(x) for x in tok[1:]]
                except ValueError:
                    raise ObjParseError(lineno, "non-numeric vertex field") from None
                colored = len(nums) == 6
                if has_color is None:
                    has_color = colored
                elif has_color != colored:
                    raise ObjParseError(lineno, "mixed colored and plain vertices")
                verts.append(nums[:3])
                if colored:
                    cols.append(nums[3:])
            elif key == "f":
                if len(tok) != 4:
                    raise ObjParseError(lineno, "only triangle faces are supported")
                try:
                    idx = [int(x.split("/")[0]) for x in tok[1:]]
                except ValueError:
                    raise ObjParseError(lineno, "non-integer face index") from None
                n = len(verts)
                face = []
                for i in idx:
                    j = i - 1 if i > 0 else n + i
                    if i == 0 or not 0 <= j < n:
                        raise MeshError(f"line {lineno}: face index {i} out of range "
                                        f"({n} vertices defined)")
                    face.append(j)
                faces.append(face)
            elif key == "vc":
                raise ObjParseError(lineno, "'vc' color records are not supported; "
                                            "use 'v x y z r g b'")
            elif key in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l"):
                continue
            else:
                raise ObjParseError(lineno, f"unknown record {key!r}")
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    colors = None
    if cols:
        c = np.clip(np.array(cols, dtype=np.float64), 1e-6, 1 - 1e-6)
        colors = np.log(c) - np.log1p(-c)
    return Mesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), colors)


# ---------------------------------------------------------------- camera IO

def save_cameras(cameras, path) -> None:
    with open(path, "w") as fh:
        for cam in cameras:
            fh.write(cam.to_line() + "\n")


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        return [Camera.from_line(ln) for ln in fh if ln.strip() and not ln.startswith("#")]


# ----------------------------------------------------------------- image IO

@dataclass
class Image:
    """Row-major float image, values in [0, 1]; shape ``(H, W, C)``."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[..., None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("image contains non-finite values")
        self.data = d

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def write_ppm(path, img, sidecar: bool = False) -> None:
    """Binary P6 (maxval 255). 1-channel images are replicated to gray.

    With ``sidecar`` the exact values are also written to ``<path>.f32`` as
    raw little-endian float32, row-major, original channel count.
    """
    data = img.data if isinstance(img, Image) else np.asarray(img, float)
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    rgb = data if c == 3 else np.repeat(data, 3, axis=2)
    q = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())
    if sidecar:
        data.astype("<f4").tofile(os.fspath(path) + ".f32")


def read_ppm(path, channels: int = 3, prefer_sidecar: bool = True) -> Image:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only P6 maxval 255 supported")
    w, h = int(tokens[1]), int(tokens[2])
    side = os.fspath(path) + ".f32"
    if prefer_sidecar and os.path.exists(side):
        raw = np.fromfile(side, dtype="<f4").astype(np.float64)
        c = raw.size // (w * h)
        data = raw.reshape(h, w, c)
        if c != channels:
            data = data[..., :1] if channels == 1 else np.repeat(data, 3, axis=2)
        return Image(data)
    rgb = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    data = rgb.reshape(h, w, 3).astype(np.float64) / 255.0
    return Image(data[..., :1] if channels == 1 else data)


# --------------------------------------------------------------- primitives

def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
         (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
         (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        mid = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in mid:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                mid[key] = len(verts) - 1
            return mid[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    verts = np.array(verts) * radius + np.asarray(center, float)
    return Mesh(verts, np.array(faces))


def box_mesh(half: float = 0.5, center=(0.0, 0.0, 0.0), subdivisions: int = 1) -> Mesh:
    """Closed axis-aligned cube surface, ``subdivisions`` quads per face edge.

    Each quad is split along the diagonal joining its lowest and highest
    coordinate-sum corners, so the (+,+,+) corner sees equal area per face.
    """
    n = subdivisions
    index = {}
    verts = []
    faces = []

    def vid(p):
        key = tuple(p)
        if key not in index:
            index[key] = len(verts)
            verts.append(key)
        return index[key]

    for axis in range(3):
        for side in (0, n):
            a1, a2 = [k for k in range(3) if k != axis]
            for i in range(n):
                for j in range(n):
                    corners = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = side
                        p[a1] = i + di
                        p[a2] = j + dj
                        corners.append(p)
                    ids = [vid(p) for p in corners]
                    sums = [sum(p) for p in corners]
                    lo = int(np.argmin(sums))
                    q = ids[lo:] + ids[:lo]
                    tris = [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
                    for tri in tris:
                        pa, pb, pc = (np.array(verts[k], float) for k in tri)
                        nrm = np.cross(pb - pa, pc - pa)
                        outward = 1.0 if side == n else -1.0
                        if nrm[axis] * outward < 0:
                            tri = (tri[0], tri[2], tri[1])
                        faces.append(tri)
    v = (np.array(verts, float) / n * 2 - 1) * half + np.asarray(center, float)
    return Mesh(v, np.array(faces))


def torus_mesh(major: float = 0.6, minor: float = 0.25, n_major: int = 48,
               n_minor: int = 24) -> Mesh:
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    th = 2 * np.pi * i / n_major
    ph = 2 * np.pi * j / n_minor
    r = major + minor * np.cos(ph)
    verts = np.stack([r * np.cos(th), r * np.sin(th), minor * np.sin(ph)], -1).reshape(-1, 3)
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                            np.stack([a, c, d], -1).reshape(-1, 3)])
    return Mesh(verts, faces)
