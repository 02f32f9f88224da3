"""Realism and physical-plausibility metrics for generated scenes.

All Frechet distances are *squared* (the FID convention). Humans are
represented by their 24-capsule proxies, so "mesh vertices" become capsule
surface samples.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import skeleton as sk
from .numerics.nn import ShapeError
from .pose_codec import CodecParams, encode

COV_JITTER = 1e-9
SAMPLES_PER_CAPSULE = 200
CONTACT_SAMPLES = 10
CONTACT_CAPSULES = {"hand": sk.HAND_CAPSULES, "hip": sk.HIP_CAPSULES}


class MetricError(ValueError):
    pass


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (self.mean.size, self.mean.size):
            raise ShapeError(f"covariance {cov.shape} does not match mean of size {self.mean.size}")
        self.cov = 0.5 * (cov + cov.T)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_samples(cls, x) -> "GaussianFit":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        n, d = x.shape
        if n < d + 1:
            raise MetricError(f"need at least {d + 1} samples to fit a {d}-D Gaussian, got {n}")
        cov = np.cov(x, rowvar=False).reshape(d, d) + COV_JITTER * np.eye(d)
        return cls(x.mean(0), cov)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """Squared Frechet distance between two Gaussians."""
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch: {a.dim} vs {b.dim}")
    ra = _sqrtm_psd(a.cov)
    cross = _sqrtm_psd(ra @ b.cov @ ra)
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(fd, 0.0)


# -- scene accessors ---------------------------------------------------------
#
# Metric inputs may be sampler scenes, dataset records, or plain arrays; these
# helpers pull out what each metric needs.


def _poses(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.reshape(-1, sk.POSE_DIM)
    out = []
    for it in items:
        humans = getattr(it, "humans", None)
        if humans is None:
            out.append(np.asarray(it, dtype=np.float64).reshape(-1, sk.POSE_DIM))
        else:
            out.append(np.stack([np.asarray(h.pose, dtype=np.float64) for h in humans]))
    return np.concatenate(out) if out else np.zeros((0, sk.POSE_DIM))


def _translations(scene) -> np.ndarray:
    humans = getattr(scene, "humans", None)
    if humans is None:
        return np.asarray(scene, dtype=np.float64).reshape(-1, 3)
    return np.stack([np.asarray(h.translation, dtype=np.float64) for h in humans])


def _capsules(scene):
    """(A, B, r) with shapes (H, 24, 3), (H, 24, 3), (H, 24)."""
    if hasattr(scene, "capsules") and callable(scene.capsules):
        return scene.capsules()
    caps = np.asarray(scene, dtype=np.float64)
    return caps[..., :3], caps[..., 3:6], caps[..., 6]


# -- realism -----------------------------------------------------------------


def body_pose_fd(generated, reference, codec: CodecParams) -> float:
    """FD between encoder embeddings of generated and reference body poses."""
    gen = encode(_poses(generated), codec)
    ref = encode(_poses(reference), codec)
    return frechet_distance(GaussianFit.from_samples(gen), GaussianFit.from_samples(ref))


def embedding_fd(generated, reference) -> float:
    """FD between two sets of already-embedded poses."""
    return frechet_distance(GaussianFit.from_samples(generated), GaussianFit.from_samples(reference))


def pairwise_differences(scenes, norm: bool = False) -> np.ndarray:
    """Stack ``t_i - t_j`` (i < j) over scenes; ``norm=True`` keeps only their lengths."""
    diffs = []
    skipped = 0
    for sc in scenes:
        t = _translations(sc)
        if len(t) < 2:
            skipped += 1
            continue
        for i in range(len(t)):
            for j in range(i + 1, len(t)):
                diffs.append(t[i] - t[j])
    if skipped:
        warnings.warn(f"{skipped} single-human scene(s) skipped", stacklevel=3)
    d = np.asarray(diffs, dtype=np.float64).reshape(-1, 3)
    return np.linalg.norm(d, axis=1, keepdims=True) if norm else d


def distance_fd(generated, reference, norm: bool = False) -> float:
    """FD of interpersonal translation differences (3-D vectors, or lengths with ``norm``)."""
    return frechet_distance(
        GaussianFit.from_samples(pairwise_differences(generated, norm)),
        GaussianFit.from_samples(pairwise_differences(reference, norm)),
    )


# -- physical plausibility ---------------------------------------------------


def capsule_samples(A, B, r, n_per: int, rng: np.random.Generator) -> np.ndarray:
    """``n_per`` surface points for every capsule of one human, shape (24 * n_per, 3)."""
    pts = []
    for c in range(len(r)):
        w, dirs = geo.capsule_surface_frame(A[c], B[c], float(r[c]), n_per, rng)
        pts.append(A[c] + w[:, None] * (B[c] - A[c]) + r[c] * dirs)
    return np.concatenate(pts)


def inside_capsules(points, A, B, r) -> np.ndarray:
    """Whether each point lies strictly within any of the capsules."""
    d = geo.point_segment_distance(points[:, None, :], A[None], B[None])
    return np.any(d < r[None], axis=1)


def penetration_ratio(scene, mesh: geo.TriangleMesh | None = None, n_per_capsule: int = SAMPLES_PER_CAPSULE,
                      seed: int = 0) -> tuple[float, float | None]:  # fmt: skip
    """``(human-human, human-object)`` fractions of surface samples inside something, x1000.

    The object term is None when no mesh is given or the mesh is not watertight.
    """
    A, B, r = _capsules(scene)
    rng = np.random.default_rng(seed)
    pts = [capsule_samples(A[h], B[h], r[h], n_per_capsule, rng) for h in range(len(r))]
    total = sum(len(p) for p in pts)
    hh = 0
    for h, p in enumerate(pts):
        hit = np.zeros(len(p), dtype=bool)
        for o in range(len(r)):
            if o != h:
                hit |= inside_capsules(p, A[o], B[o], r[o])
        hh += int(hit.sum())
    ho = None
    if mesh is not None:
        if mesh.open_edge() is not None:
            warnings.warn("object mesh is not watertight; human-object penetration skipped", stacklevel=2)
        else:
            ho = 1000.0 * float(geo.points_in_mesh(np.concatenate(pts), mesh).sum()) / total
    return 1000.0 * hh / total, ho


def contact_distance(scene, mesh: geo.TriangleMesh, kind: str = "hand", n: int = CONTACT_SAMPLES,
                     seed: int = 0) -> float:  # fmt: skip
    """Mean distance from ``n`` sampled body-part surface points to the mesh, averaged over humans."""
    if kind not in CONTACT_CAPSULES:
        raise ValueError(f"contact kind must be one of {sorted(CONTACT_CAPSULES)}")
    ids = np.asarray(CONTACT_CAPSULES[kind])
    A, B, r = _capsules(scene)
    rng = np.random.default_rng(seed)
    per_human = []
    for h in range(len(r)):
        a, b, rad = A[h][ids], B[h][ids], r[h][ids]
        area = sk.capsule_areas(a, b, rad)
        which = rng.choice(len(ids), size=n, p=area / area.sum())
        pts = []
        for k in range(len(ids)):
            m = int((which == k).sum())
            if m:
                w, dirs = geo.capsule_surface_frame(a[k], b[k], float(rad[k]), m, rng)
                pts.append(a[k] + w[:, None] * (b[k] - a[k]) + rad[k] * dirs)
        per_human.append(float(np.mean(geo.points_to_mesh_distance(np.concatenate(pts), mesh))))
    return float(np.mean(per_human))


def scene_is_valid(scene, n_target: int) -> bool:
    if scene is None or len(getattr(scene, "humans", ())) != n_target:
        return False
    clamped = 0
    for h in scene.humans:
        values = [np.asarray(h.rotation), np.asarray(h.translation), np.asarray(h.pose), np.asarray(h.scale)]
        if not all(np.all(np.isfinite(v)) for v in values):
            return False
        R = np.asarray(h.rotation)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            return False
        if not h.scale >= 0.05:
            return False
        clamped += bool(getattr(h, "scale_clamped", False))
    return clamped <= 1


def success_rate(runs, n_target: int) -> float:
    """Fraction of runs that produced ``n_target`` valid humans; failed runs may be None."""
    runs = list(runs)
    if not runs:
        raise MetricError("need at least one run")
    return sum(scene_is_valid(r, n_target) for r in runs) / len(runs)


# -- reports -----------------------------------------------------------------


def report_json(metrics: dict, config: dict | None = None) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    body = {
        "note": "Frechet distances are squared; penetration ratios are x1000",
        "metrics": {k: clean(v) for k, v in metrics.items()},
        "config": config or {},
    }
    return json.dumps(body, indent=2, sort_keys=True)


def report_table(metrics: dict) -> str:
    """Aligned two-column plain-text table."""
    rows = [(k, "n/a" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)) for k, v in metrics.items()]
    width = max([len("metric")] + [len(k) for k, _ in rows])
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
    lines += [f"{k:<{width}}  {v}" for k, v in rows]
    lines.append("(FD values are squared Frechet distances; penetration x1000)")
    return "\n".join(lines)
