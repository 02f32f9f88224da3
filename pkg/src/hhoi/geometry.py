"""Rotations, similarity transforms, segments, capsules and triangle meshes.

Functions that the guidance losses differentiate through (``gram_schmidt``,
``segment_distance``) are written with :mod:`hhoi.numerics.autograd`
primitives and accept either arrays or tape variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .numerics import autograd as ad


class GeometryError(ValueError):
    pass


class DegenerateRotationError(GeometryError):
    pass


# -- 6D rotations -----------------------------------------------------------

PARALLEL_ANGLE = 1e-7


def gram_schmidt(r6):
    """Batched 6D -> rotation matrix (..., 6) -> (..., 3, 3), no validation.

    Column 0 is the normalised first 3-vector, column 1 the second vector
    orthogonalised against it, column 2 their cross product.
    """
    a = ad.getitem(r6, (Ellipsis, slice(0, 3)))
    b = ad.getitem(r6, (Ellipsis, slice(3, 6)))
    c0 = a / ad.norm(a, keepdims=True)
    b_perp = b - ad.dot(c0, b, keepdims=True) * c0
    c1 = b_perp / ad.norm(b_perp, keepdims=True)
    c2 = ad.cross(c0, c1)
    return ad.stack([c0, c1, c2], axis=-1)


def _parallel_angle(r6: np.ndarray) -> np.ndarray:
    a, b = r6[..., :3], r6[..., 3:]
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    cr = np.linalg.norm(np.cross(a, b), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = np.arctan2(cr, np.abs((a * b).sum(-1)))
    return np.where((na > 0) & (nb > 0), ang, 0.0)


def rot6d_to_matrix(r6) -> np.ndarray:
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got {r6.shape}")
    if not np.all(np.isfinite(r6)):
        raise DegenerateRotationError("non-finite 6D rotation")
    ang = _parallel_angle(r6)
    if np.any(ang <= PARALLEL_ANGLE):
        bad = np.argwhere(np.atleast_1d(ang <= PARALLEL_ANGLE))
        raise DegenerateRotationError(
            f"6D rotation vectors are zero or parallel at index {bad[0].tolist()}"
        )
    return gram_schmidt(r6)


def regularize_rot6d(r6, eps: float = 1e-6):
    """Nudge near-degenerate 6D blocks so Gram-Schmidt stays finite.

    Blocks whose vectors are (near) parallel get ``eps`` times a unit vector
    orthogonal to the first vector added to the second; a (near) zero first
    vector is replaced by ``eps * e_x``. The nudge is a constant offset, so
    gradients pass through unchanged.
    """
    v = ad.value(r6)
    a, b = v[..., :3], v[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    offset = np.zeros_like(v)
    zero_a = na[..., 0] < 1e-12
    offset[..., 0] = np.where(zero_a, eps, 0.0)
    a_eff = np.where(zero_a[..., None], np.array([eps, 0.0, 0.0]), a)
    cr = np.linalg.norm(np.cross(a_eff, b), axis=-1)
    na_eff = np.linalg.norm(a_eff, axis=-1)
    bad = cr <= np.sin(PARALLEL_ANGLE) * na_eff * np.maximum(nb[..., 0], 1e-300)
    if np.any(bad):
        # complement: a x e_k for the axis least aligned with a
        k = np.argmin(np.abs(a_eff), axis=-1)
        ek = np.eye(3)[k]
        perp = np.cross(a_eff, ek)
        perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
        offset[..., 3:] = np.where(bad[..., None], eps * perp, 0.0)
    if not np.any(offset):
        return r6
    return r6 + offset


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    check_rotation(R, tol=1e-6)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def check_rotation(R, tol: float = 1e-6) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise GeometryError(f"expected (..., 3, 3) rotation, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise GeometryError("rotation has non-finite entries")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if err > tol:
        raise GeometryError(f"rotation not orthonormal (max |R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if np.any(np.abs(det - 1.0) > tol):
        raise GeometryError(f"rotation determinant {np.min(det):.6g} is not +1")


def axis_rotation(axis: str, degrees: float) -> np.ndarray:
    return Rotation.from_euler(axis, degrees, degrees=True).as_matrix()


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(n, random_state=rng).as_matrix()


def geodesic_angle(R1, R2) -> np.ndarray:
    """Rotation angle of ``R1^T R2`` in radians, batched."""
    rel = np.swapaxes(np.asarray(R1), -1, -2) @ np.asarray(R2)
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1) >= 1e-9:
            raise GeometryError("similarity rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise GeometryError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ inner``."""
        return SimilarityTransform(
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
            self.scale * inner.scale,
        )

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)


# -- segments and capsules ---------------------------------------------------


@dataclass(frozen=True)
class Segment:
    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class Capsule:
    axis: Segment
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise GeometryError(f"capsule radius must be positive, got {self.radius}")


def segment_distance(p1, q1, p2, q2, eps: float = 1e-14):
    """Closest distance between segments ``p1q1`` and ``p2q2``, batched over leading axes.

    Clamped closed form of the two-parameter quadratic; parallel and point-like
    segments fall back to projecting one endpoint. Differentiable (almost
    everywhere) when given tape variables.
    """
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a = ad.dot(d1, d1)
    e = ad.dot(d2, d2)
    f = ad.dot(d2, r)
    c = ad.dot(d1, r)
    b = ad.dot(d1, d2)
    av, ev, bv = ad.value(a), ad.value(e), ad.value(b)
    a_pt, e_pt = av <= eps, ev <= eps
    a_safe = ad.where(a_pt, 1.0, a)
    e_safe = ad.where(e_pt, 1.0, e)
    denom = a * e - b * b
    dv = ad.value(denom)
    parallel = dv <= 1e-12 * av * ev
    s_raw = ad.where(parallel, 0.0, b * f - c * e) / ad.where(parallel, 1.0, denom)
    s_gen = ad.where(parallel, 0.0, ad.clip(s_raw, 0.0, 1.0, track=False))
    t_raw = (b * s_gen + f) / e_safe
    trv = ad.value(t_raw)
    lo, hi = trv < 0.0, trv > 1.0
    s_lo_raw = -c / a_safe
    s_hi_raw = (b - c) / a_safe
    s_lo = ad.clip(s_lo_raw, 0.0, 1.0, track=False)
    s_hi = ad.clip(s_hi_raw, 0.0, 1.0, track=False)
    s = ad.where(lo, s_lo, ad.where(hi, s_hi, s_gen))
    t = ad.where(lo, 0.0, ad.where(hi, 1.0, t_raw))
    # degenerate segments
    t_a_pt = ad.clip(f / e_safe, 0.0, 1.0, track=False)
    s = ad.where(a_pt, 0.0, ad.where(e_pt, s_lo, s))
    t = ad.where(a_pt & e_pt, 0.0, ad.where(a_pt, t_a_pt, ad.where(e_pt, 0.0, t)))
    if isinstance(s, ad.Var):
        # margins of the branch switches that are actually taken
        srv, slv, shv = ad.value(s_raw), ad.value(s_lo_raw), ad.value(s_hi_raw)
        generic = ~(a_pt | e_pt)
        m = np.minimum(np.abs(trv), np.abs(trv - 1.0))
        m = np.minimum(m, np.where(~parallel, np.minimum(np.abs(srv), np.abs(srv - 1.0)), np.inf))
        m = np.where(lo, np.minimum(m, np.minimum(np.abs(slv), np.abs(slv - 1.0))), m)
        m = np.where(hi, np.minimum(m, np.minimum(np.abs(shv), np.abs(shv - 1.0))), m)
        ad.note_kink(s, np.where(generic, m, np.inf))
    s = ad.reshape(s, np.shape(ad.value(s)) + (1,))
    t = ad.reshape(t, np.shape(ad.value(t)) + (1,))
    gap = (p1 + s * d1) - (p2 + t * d2)
    return ad.norm(gap)


def segment_segment_distance(s1: Segment, s2: Segment) -> float:
    return float(segment_distance(*(np.asarray(x, float) for x in (s1.a, s1.b, s2.a, s2.b))))


def capsule_overlap(c1: Capsule, c2: Capsule) -> float:
    d = segment_segment_distance(c1.axis, c2.axis)
    return max(0.0, c1.radius + c2.radius - d)


def point_segment_distance(points, a, b) -> np.ndarray:
    """Distance from points (..., 3) to segments ``ab`` broadcast against them."""
    points, a, b = (np.asarray(x, dtype=np.float64) for x in (points, a, b))
    d = b - a
    dd = (d * d).sum(-1)
    w = ((points - a) * d).sum(-1) / np.where(dd > 0, dd, 1.0)
    w = np.clip(np.where(dd > 0, w, 0.0), 0.0, 1.0)
    return np.linalg.norm(points - (a + w[..., None] * d), axis=-1)


def _perp_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = np.argmin(np.abs(u))
    e1 = np.cross(u, np.eye(3)[k])
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def capsule_surface_frame(a, b, radius: float, n: int, rng: np.random.Generator):
    """Area-uniform surface parameterisation of a capsule.

    Returns ``(w, dirs)`` such that ``a + w * (b - a) + radius * dirs`` are
    ``n`` surface points: ``w`` in [0, 1] along the axis and ``dirs`` unit
    vectors (perpendicular to the axis on the cylinder, outward on the caps).
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = float(np.linalg.norm(axis))
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if length < 1e-12:
        return np.zeros(n), dirs
    u = axis / length
    p_cyl = length / (length + 2.0 * radius)
    region = rng.random(n)
    on_cyl = region < p_cyl
    w = np.where(on_cyl, rng.random(n), 0.0)
    # caps: hemisphere chosen by the direction's side of the axis
    along = dirs @ u
    w = np.where(~on_cyl & (along >= 0), 1.0, w)
    e1, e2 = _perp_basis(u)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    dirs = np.where(on_cyl[:, None], ring, dirs)
    return w, dirs


def sample_capsule_surface(capsule: Capsule, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one sample")
    a, b = capsule.axis.a, capsule.axis.b
    w, dirs = capsule_surface_frame(a, b, capsule.radius, n, rng)
    return a + w[:, None] * (np.asarray(b) - a) + capsule.radius * dirs


# -- triangle meshes --------------------------------------------------------


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    dropped_faces: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")
        tri = self.vertices[faces]
        area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        keep = area2 > 1e-14
        self.dropped_faces = int((~keep).sum())
        self.faces = faces[keep]

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def open_edge(self) -> tuple[int, int] | None:
        """An edge not shared by exactly two faces, or None if watertight."""
        if not len(self.faces):
            return (0, 0)
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        bad = np.flatnonzero(counts != 2)
        return None if bad.size == 0 else tuple(int(i) for i in uniq[bad[0]])

    def transformed(self, xf: SimilarityTransform) -> "TriangleMesh":
        return TriangleMesh(xf.apply(self.vertices), self.faces.copy())


def load_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records of an ASCII OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise GeometryError(f"{path}:{lineno}: {exc}") from None
    return TriangleMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, int).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def box_mesh(extents, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed axis-aligned box with outward-wound faces."""
    hx, hy, hz = np.asarray(extents, float) / 2
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ) + np.asarray(center, float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [f for a, b, c, d in quads for f in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, np.array(faces))


def closest_point_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point on each triangle (T, 3, 3) to point ``p`` (3,), by Voronoi region."""
    A, B, C = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = B - A, C - A, p - A
    d1, d2 = (ab * ap).sum(1), (ac * ap).sum(1)
    bp = p - B
    d3, d4 = (ab * bp).sum(1), (ac * bp).sum(1)
    cp = p - C
    d5, d6 = (ab * cp).sum(1), (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = A + v_in[:, None] * ab + w_in[:, None] * ac
        # edge regions
        v_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(on_ab[:, None], A + v_ab[:, None] * ab, out)
        w_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(on_ac[:, None], A + w_ac[:, None] * ac, out)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out = np.where(on_bc[:, None], B + w_bc[:, None] * (C - B), out)
    # vertex regions take precedence
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], A, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], B, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], C, out)
    return out


def point_to_mesh_distance(p, mesh: TriangleMesh) -> float:
    if not len(mesh.faces):
        raise GeometryError("mesh has no faces")
    p = np.asarray(p, dtype=np.float64)
    q = closest_point_on_triangles(p, mesh.triangles)
    return float(np.min(np.linalg.norm(q - p, axis=1)))


def points_to_mesh_distance(points, mesh: TriangleMesh) -> np.ndarray:
    return np.array([point_to_mesh_distance(p, mesh) for p in np.asarray(points).reshape(-1, 3)])


def _ray_hits(origins: np.ndarray, direction: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Number of triangles hit at positive ray parameter, per origin (Moller-Trumbore)."""
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    h = np.cross(direction, e2)
    det = (e1 * h).sum(1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins[:, None, :] - v0[None]
    u = (s * h[None]).sum(-1) * inv
    q = np.cross(s, e1[None])
    v = (q * direction).sum(-1) * inv
    t = (q * e2[None]).sum(-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return hit.sum(1)


def points_in_mesh(points, mesh: TriangleMesh, seed: int = 0, chunk: int = 2048) -> np.ndarray:
    """Parity test along 3 seeded random rays, majority vote. Mesh must be watertight."""
    edge = mesh.open_edge()
    if edge is not None:
        raise GeometryError(f"mesh is not watertight: edge {edge} is not shared by exactly two faces")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tri = mesh.triangles
    votes = np.zeros(len(pts), dtype=int)
    for start in range(0, len(pts), chunk):
        sl = slice(start, start + chunk)
        for d in dirs:
            votes[sl] += _ray_hits(pts[sl], d, tri) % 2
    return votes >= 2


def point_in_mesh(p, mesh: TriangleMesh, seed: int = 0) -> bool:
    return bool(points_in_mesh(np.asarray(p)[None], mesh, seed)[0])
