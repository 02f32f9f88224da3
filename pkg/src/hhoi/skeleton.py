"""Canonical 22-joint articulated human, forward kinematics and the 24-capsule proxy.

The joint tree mirrors the SMPL-X body joints (pelvis root). Rest offsets
describe a 1.7 m figure in a y-up frame facing +z, left side on +x:

    id  joint           parent  rest offset (m)
    0   pelvis          -1      ( 0.00,  0.00,  0.00)
    1   left_hip         0      ( 0.06, -0.09,  0.00)
    2   right_hip        0      (-0.06, -0.09,  0.00)
    3   spine1           0      ( 0.00,  0.11, -0.01)
    4   left_knee        1      ( 0.04, -0.38,  0.00)
    5   right_knee       2      (-0.04, -0.38,  0.00)
    6   spine2           3      ( 0.00,  0.13,  0.00)
    7   left_ankle       4      ( 0.00, -0.40, -0.04)
    8   right_ankle      5      ( 0.00, -0.40, -0.04)
    9   spine3           6      ( 0.00,  0.06,  0.02)
    10  left_foot        7      ( 0.02, -0.05,  0.12)
    11  right_foot       8      (-0.02, -0.05,  0.12)
    12  neck             9      ( 0.00,  0.21, -0.03)
    13  left_collar      9      ( 0.08,  0.12, -0.01)
    14  right_collar     9      (-0.08,  0.12, -0.01)
    15  head            12      ( 0.00,  0.09,  0.05)
    16  left_shoulder   13      ( 0.12,  0.04, -0.01)
    17  right_shoulder  14      (-0.12,  0.04, -0.01)
    18  left_elbow      16      ( 0.26,  0.00, -0.02)
    19  right_elbow     17      (-0.26,  0.00, -0.02)
    20  left_wrist      18      ( 0.25,  0.01,  0.00)
    21  right_wrist     19      (-0.25,  0.01,  0.00)

Capsule ids: 0-20 are the bones joint ``j`` -> ``parent(j)`` for j = 1..21
(id ``j - 1``), 21/22 the left/right hands and 23 the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .numerics import autograd as ad
from .numerics.optim import AdamState, adam_step

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)  # fmt: skip
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
REST_OFFSETS = np.array(
    [
        [0.00, 0.00, 0.00], [0.06, -0.09, 0.00], [-0.06, -0.09, 0.00], [0.00, 0.11, -0.01],
        [0.04, -0.38, 0.00], [-0.04, -0.38, 0.00], [0.00, 0.13, 0.00], [0.00, -0.40, -0.04],
        [0.00, -0.40, -0.04], [0.00, 0.06, 0.02], [0.02, -0.05, 0.12], [-0.02, -0.05, 0.12],
        [0.00, 0.21, -0.03], [0.08, 0.12, -0.01], [-0.08, 0.12, -0.01], [0.00, 0.09, 0.05],
        [0.12, 0.04, -0.01], [-0.12, 0.04, -0.01], [0.26, 0.00, -0.02], [-0.26, 0.00, -0.02],
        [0.25, 0.01, 0.00], [-0.25, 0.01, 0.00],
    ]
)  # fmt: skip

N_JOINTS = 22
N_POSE_JOINTS = 21
POSE_DIM = 126
N_CAPSULES = 24
HAND_LENGTH = 0.18
HEAD_LENGTH = 0.20
# hand and head capsules extend their parent bone by a fixed fraction, so the
# proxy scales with the skeleton (0.18 m and 0.20 m on the default template)
HAND_RATIO = HAND_LENGTH / float(np.linalg.norm(REST_OFFSETS[20]))
HEAD_RATIO = HEAD_LENGTH / float(np.linalg.norm(REST_OFFSETS[15]))
LEFT_HAND, RIGHT_HAND, HEAD = 21, 22, 23
HAND_CAPSULES = (LEFT_HAND, RIGHT_HAND)
HIP_CAPSULES = (0, 1, 2)
RADIUS_BOUNDS = (0.005, 0.5)

# torso 0.11, limbs 0.05, head 0.10
DEFAULT_RADII = np.array(
    [
        0.09, 0.09, 0.11, 0.07, 0.07, 0.11, 0.05, 0.05, 0.11, 0.04, 0.04, 0.06,
        0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.04, 0.04, 0.04, 0.04, 0.10,
    ]
)  # fmt: skip


@dataclass(frozen=True)
class SkeletonTemplate:
    names: tuple[str, ...] = JOINT_NAMES
    parents: tuple[int, ...] = PARENTS
    offsets: np.ndarray = REST_OFFSETS

    def __post_init__(self) -> None:
        if len(self.names) != N_JOINTS or len(self.parents) != N_JOINTS:
            raise ValueError("template needs 22 joints")
        if [p for p in self.parents if p < 0] != [-1] or self.parents[0] != -1:
            raise ValueError("joint 0 must be the only root")
        if any(not 0 <= p < j for j, p in enumerate(self.parents) if j):
            raise ValueError("parents must precede their children")
        if not np.all(np.isfinite(self.offsets)) or np.shape(self.offsets) != (N_JOINTS, 3):
            raise ValueError("offsets must be a finite (22, 3) table")

    def scaled(self, factor: float) -> "SkeletonTemplate":
        return SkeletonTemplate(self.names, self.parents, np.asarray(self.offsets) * factor)


TEMPLATE = SkeletonTemplate()


def identity_pose() -> np.ndarray:
    """The rest (T) pose as a 126-vector of 6D rotations."""
    return np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], N_POSE_JOINTS)


def pose_to_matrices(pose) -> np.ndarray:
    """Validated (..., 126) -> (..., 21, 3, 3)."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-1] != POSE_DIM:
        raise ValueError(f"body pose must have {POSE_DIM} entries, got {pose.shape}")
    blocks = pose.reshape(pose.shape[:-1] + (N_POSE_JOINTS, 6))
    for j in range(N_POSE_JOINTS):
        try:
            geo.rot6d_to_matrix(blocks[..., j, :])
        except geo.DegenerateRotationError as exc:
            raise geo.DegenerateRotationError(f"joint {j + 1}: {exc}") from None
    return geo.gram_schmidt(blocks)


def fk_from_matrices(rots, template: SkeletonTemplate = TEMPLATE):
    """Joint positions (..., 22, 3) from per-joint rotations (..., 21, 3, 3), root at origin."""
    offsets = np.asarray(template.offsets)
    lead = np.shape(ad.value(rots))[:-3]
    glob = [np.broadcast_to(np.eye(3), lead + (3, 3))]
    pos = [np.zeros(lead + (3,))]
    for j in range(1, N_JOINTS):
        p = template.parents[j]
        R_j = ad.getitem(rots, (Ellipsis, j - 1, slice(None), slice(None)))
        pos.append(pos[p] + ad.matmul(glob[p], offsets[j]))
        glob.append(ad.matmul(glob[p], R_j))
    if any(isinstance(x, ad.Var) for x in pos):
        pos[0] = ad.mul(pos[1], 0.0) + 0.0  # keep a uniform type for stacking
    return ad.stack(pos, axis=-2)


def forward_kinematics(pose, template: SkeletonTemplate = TEMPLATE) -> np.ndarray:
    return fk_from_matrices(pose_to_matrices(pose), template)


def pose_fk(pose_vec, template: SkeletonTemplate = TEMPLATE, regularize: bool = True):
    """Differentiable FK straight from raw 6D blocks (as decoded during sampling)."""
    lead = np.shape(ad.value(pose_vec))[:-1]
    blocks = ad.reshape(pose_vec, lead + (N_POSE_JOINTS, 6))
    if regularize:
        blocks = geo.regularize_rot6d(blocks)
    return fk_from_matrices(geo.gram_schmidt(blocks), template)


def proxy_segments(joints):
    """Capsule axis endpoints ``(A, B)``, each (..., 24, 3), from joints (..., 22, 3)."""

    def J(k):
        return ad.getitem(joints, (Ellipsis, k, slice(None)))

    child = list(range(1, N_JOINTS))
    parent = [PARENTS[j] for j in child]
    A_bones = ad.getitem(joints, (Ellipsis, child, slice(None)))
    B_bones = ad.getitem(joints, (Ellipsis, parent, slice(None)))
    lw, rw = J(20), J(21)
    l_tip = lw + HAND_RATIO * (lw - J(18))
    r_tip = rw + HAND_RATIO * (rw - J(19))
    head = J(15)
    h_tip = head + HEAD_RATIO * (head - J(12))
    A = ad.concat([A_bones, ad.stack([lw, rw, head], axis=-2)], axis=-2)
    B = ad.concat([B_bones, ad.stack([l_tip, r_tip, h_tip], axis=-2)], axis=-2)
    return A, B


def check_radii(radii) -> np.ndarray:
    r = np.asarray(radii, dtype=np.float64)
    if r.shape != (N_CAPSULES,):
        raise ValueError(f"need {N_CAPSULES} radii, got shape {r.shape}")
    lo, hi = RADIUS_BOUNDS
    if np.any(r <= lo) or np.any(r >= hi):
        raise ValueError(f"radii must lie in ({lo}, {hi})")
    return r


@dataclass(frozen=True)
class CapsuleProxy:
    capsules: tuple[geo.Capsule, ...]

    def __len__(self) -> int:
        return len(self.capsules)

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.array([c.axis.a for c in self.capsules]),
            np.array([c.axis.b for c in self.capsules]),
        )

    @property
    def radii(self) -> np.ndarray:
        return np.array([c.radius for c in self.capsules])


def build_capsule_proxy(joints, radii=DEFAULT_RADII) -> CapsuleProxy:
    radii = check_radii(radii)
    A, B = proxy_segments(np.asarray(joints, dtype=np.float64))
    return CapsuleProxy(
        tuple(geo.Capsule(geo.Segment(A[k], B[k]), float(radii[k])) for k in range(N_CAPSULES))
    )


def capsule_areas(A, B, radii) -> np.ndarray:
    length = np.linalg.norm(np.asarray(B) - np.asarray(A), axis=-1)
    return 2 * np.pi * radii * length + 4 * np.pi * radii**2


def _surface_layout(A, B, radii, n: int, rng: np.random.Generator):
    """Capsule id, axis parameter and direction for ``n`` area-uniform proxy points."""
    area = capsule_areas(A, B, radii)
    ids = np.sort(rng.choice(N_CAPSULES, size=n, p=area / area.sum()))
    w = np.empty(n)
    dirs = np.empty((n, 3))
    for c in range(N_CAPSULES):
        sel = ids == c
        if sel.any():
            w[sel], dirs[sel] = geo.capsule_surface_frame(A[c], B[c], radii[c], int(sel.sum()), rng)
    return ids, w, dirs


def proxy_surface_points(joints, radii, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform samples over the union of the 24 capsule surfaces."""
    A, B = proxy_segments(np.asarray(joints, dtype=np.float64))
    radii = np.asarray(radii, dtype=np.float64)
    ids, w, dirs = _surface_layout(A, B, radii, n, rng)
    return A[ids] + w[:, None] * (B[ids] - A[ids]) + radii[ids][:, None] * dirs


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Mean symmetric squared-distance Chamfer between point sets."""
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return float(np.mean(d_pq**2) + np.mean(d_qp**2))


def fit_radii(
    poses,
    reference_clouds,
    template: SkeletonTemplate = TEMPLATE,
    steps: int = 500,
    n_points: int = 5000,
    init=DEFAULT_RADII,
    seed: int = 0,
    history: list | None = None,
) -> np.ndarray:
    """Per-capsule radii minimising the Chamfer distance to reference surface clouds.

    Adam on log-radii; proxy points are re-drawn from a fixed seed every step
    so the objective is deterministic. If ``history`` is given, the mean
    Chamfer value of every step is appended to it.
    """
    poses = [np.asarray(p, dtype=np.float64) for p in poses]
    clouds = [np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in reference_clouds]
    if not poses or len(poses) != len(clouds):
        raise ValueError("fit_radii needs at least one pose with a paired reference cloud")
    segs = [proxy_segments(forward_kinematics(p, template)) for p in poses]
    trees = [cKDTree(c) for c in clouds]
    lo, hi = np.log(RADIUS_BOUNDS[0] * 1.0001), np.log(RADIUS_BOUNDS[1] * 0.9999)
    logr = np.clip(np.log(np.asarray(init, dtype=np.float64)), lo, hi)
    state = AdamState.zeros_like(logr)
    for _ in range(steps):
        radii = np.exp(logr)
        rng = np.random.default_rng(seed)
        with ad.Tape() as tape:
            lr_var = tape.watch(logr)
            r = ad.exp(lr_var)
            total = 0.0
            for (A, B), tree, cloud in zip(segs, trees, clouds):
                ids, w, dirs = _surface_layout(A, B, radii, n_points, rng)
                base = A[ids] + w[:, None] * (B[ids] - A[ids])
                pts = base + ad.reshape(ad.getitem(r, ids), (n_points, 1)) * dirs
                pv = ad.value(pts)
                _, nn_q = tree.query(pv)
                _, nn_p = cKDTree(pv).query(cloud)
                fwd = ad.mean(ad.sum_(ad.square(pts - cloud[nn_q]), axis=1))
                bwd = ad.mean(ad.sum_(ad.square(ad.getitem(pts, nn_p) - cloud), axis=1))
                total = total + fwd + bwd
            loss = total / float(len(poses))
        (g,) = tape.gradient(loss, [lr_var])
        if history is not None:
            history.append(float(ad.value(loss)))
        logr, state = adam_step(logr, g, state)
        logr = np.clip(logr, lo, hi)
    return np.exp(logr)


def load_cloud(path) -> np.ndarray:
    """Whitespace-separated XYZ text, one point per line."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate") from None
    return np.array(rows).reshape(-1, 3)


def save_cloud(path, points) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.9f")
