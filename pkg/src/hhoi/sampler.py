"""Probability-flow ODE sampling and guided composition of HOI/HHI samples.

Sample layouts (see :mod:`hhoi.diffusion`)::

    HOI (20): rot6d[0:6]  trans[6:9]  scale[9]  pose[10:20]
    HHI (29): pose_ref[0:10]  rot6d[10:16]  trans[16:19]  pose_other[19:29]

An edge ``(src, dst)`` of an :class:`HhiGraph` is the interaction
"H_src -> H_dst": its HHI sample holds dst's pose as the reference, src's
rotation/translation relative to dst, and src's pose.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as geo
from . import skeleton as sk
from .diffusion import NoiseSchedule, ScoreNet, score_forward
from .numerics import autograd as ad
from .pose_codec import CodecParams, decode_with

ROT = slice(0, 6)
TRANS = slice(6, 9)
SCALE = 9
POSE = slice(10, 20)
HHI_POSE_REF = slice(0, 10)
HHI_ROT = slice(10, 16)
HHI_TRANS = slice(16, 19)
HHI_POSE_OTHER = slice(19, 29)
MIN_SCALE = 0.05


class SamplerError(RuntimeError):
    pass


class GraphError(ValueError):
    pass


# -- interaction graph -------------------------------------------------------


@dataclass
class HhiGraph:
    n_humans: int
    edges: list[tuple[int, int]] = field(default_factory=list)
    hoi_prompts: list[str] | None = None
    edge_prompts: list[str] | None = None
    keys: list[str] | None = None

    def __post_init__(self) -> None:
        self.edges = [(int(a), int(b)) for a, b in self.edges]
        if self.keys is None:
            self.keys = [f"H{i}" for i in range(self.n_humans)]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacent(self, i: int, j: int) -> bool:
        return (i, j) in self.edges or (j, i) in self.edges

    def non_adjacent_pairs(self) -> list[tuple[int, int]]:
        return [
            (i, j)
            for i in range(self.n_humans)
            for j in range(i + 1, self.n_humans)
            if not self.adjacent(i, j)
        ]


def _find_cycle(n: int, edges) -> list[int] | None:
    succ: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in edges:
        succ[a].append(b)
    color = [0] * n
    stack: list[int] = []

    def visit(u):
        color[u] = 1
        stack.append(u)
        for v in succ[u]:
            if color[v] == 1:
                return stack[stack.index(v) :] + [v]
            if color[v] == 0:
                found = visit(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for u in range(n):
        if color[u] == 0:
            found = visit(u)
            if found:
                return found
    return None


def validate_hhi_graph(g: HhiGraph) -> None:
    """Raise :class:`GraphError` unless the edge set is a simple DAG on the humans."""
    n = g.n_humans
    if n < 1:
        raise GraphError("need at least one human")
    if len(g.edges) > n * (n - 1) // 2:
        raise GraphError(f"{len(g.edges)} edges exceed the maximum {n * (n - 1) // 2} for {n} humans")
    seen = set()
    for a, b in g.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise GraphError(f"edge H{a + 1}->H{b + 1} references a missing human")
        if a == b:
            raise GraphError(f"self-edge on H{a + 1}")
        pair = (min(a, b), max(a, b))
        if pair in seen:
            raise GraphError(f"duplicate interaction between H{pair[0] + 1} and H{pair[1] + 1}")
        seen.add(pair)
    cycle = _find_cycle(n, g.edges)
    if cycle:
        raise GraphError("cyclic interaction graph: " + " -> ".join(f"H{k + 1}" for k in cycle))
    for name, prompts, want in (("hoi_prompts", g.hoi_prompts, n), ("edge_prompts", g.edge_prompts, len(g.edges))):
        if prompts is not None and len(prompts) != want:
            raise GraphError(f"{name} has {len(prompts)} entries, expected {want}")
    if len(set(g.keys)) != n:
        raise GraphError("human keys must be unique, one per human")


# -- PF ODE ------------------------------------------------------------------


def rk4_step(f, x, t0: float, t1: float):
    h = t1 - t0
    k1 = f(x, t0)
    k2 = f(x + 0.5 * h * k1, t0 + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t0 + 0.5 * h)
    k4 = f(x + h * k3, t1)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _as_score_fn(score, cond):
    if isinstance(score, ScoreNet):
        return lambda x, t: score_forward(score, x, t, cond)
    return score


def pf_ode_sample(score, sched: NoiseSchedule, rng=None, steps: int = 500, shape=None,
                  cond=None, x1=None) -> np.ndarray:  # fmt: skip
    """Integrate the reverse-time PF ODE from t=1 to t=eps with fixed-step RK4.

    ``score`` is a :class:`ScoreNet` (evaluated with condition ``cond``) or
    a callable ``score(x, t)``. The start state is ``x1`` if given, otherwise
    ``sigma_max * N(0, I)`` of ``shape`` (default: the network's dimension).
    """
    fn = _as_score_fn(score, cond)
    if x1 is None:
        if shape is None:
            shape = (score.dim,)
        x1 = sched.sigma_max * rng.standard_normal(shape)
    x = np.array(x1, dtype=np.float64)
    ts = np.linspace(1.0, sched.eps, steps + 1)

    def drift(x, t):
        return -sched.sigma(t) * sched.sigma_dot(t) * fn(x, t)

    for k in range(steps):
        x = rk4_step(drift, x, ts[k], ts[k + 1])
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite state at step {k} (t={ts[k + 1]:.6g})")
    return x


# -- guidance losses ---------------------------------------------------------
#
# Losses accept leading batch axes: ``hoi`` is (..., N, 20) and ``hhi``
# (..., M, 29); each returns one value per scene, shape (...).


def _set_variance(xs, feat_ndim: int):
    """``(1/n) sum_k ||x_k - mean||^2`` over a list of same-shaped estimates."""
    X = ad.stack(xs, axis=0)
    dev = X - ad.mean(X, axis=0, keepdims=True)
    sq = ad.sum_(ad.square(dev), axis=0)
    for _ in range(feat_ndim):
        sq = ad.sum_(sq, axis=-1)
    return sq / float(len(xs))


def _rows(x, i, cols):
    return ad.getitem(x, (Ellipsis, i, cols))


def sample_rotations(x, cols):
    """Rotation matrices (..., k, 3, 3) from the 6D block ``cols`` of each row."""
    return geo.gram_schmidt(geo.regularize_rot6d(ad.getitem(x, (Ellipsis, cols))))


def inconsistency_loss(hoi, hhi, g: HhiGraph, terms: bool = False):
    """Occurrence-weighted variances of each human's scale, pose, rotation and translation.

    With ``terms=True`` returns the four components ``(s, theta, R, t)``.
    """
    N = g.n_humans
    L_s = float(N) * _set_variance([_rows(hoi, i, SCALE) for i in range(N)], 0)
    R_h = sample_rotations(hoi, ROT)
    R_rel = sample_rotations(hhi, HHI_ROT) if g.edges else None
    zero = np.zeros(np.shape(ad.value(hoi))[:-2])
    L_th, L_R, L_t = zero, zero, zero
    for i in range(N):
        thetas = [_rows(hoi, i, POSE)]
        rots = [ad.getitem(R_h, (Ellipsis, i, slice(None), slice(None)))]
        trans = [_rows(hoi, i, TRANS)]
        for e, (src, dst) in enumerate(g.edges):
            if dst == i:
                thetas.append(_rows(hhi, e, HHI_POSE_REF))
            if src == i:
                thetas.append(_rows(hhi, e, HHI_POSE_OTHER))
                R_j = ad.getitem(R_h, (Ellipsis, dst, slice(None), slice(None)))
                R_e = ad.getitem(R_rel, (Ellipsis, e, slice(None), slice(None)))
                rots.append(ad.matmul(R_j, R_e))
                s_j = _rows(hoi, dst, slice(SCALE, SCALE + 1))
                t_rel = ad.reshape(_rows(hhi, e, HHI_TRANS), np.shape(ad.value(hoi))[:-2] + (3, 1))
                moved = ad.reshape(ad.matmul(R_j, t_rel), np.shape(ad.value(hoi))[:-2] + (3,))
                trans.append(s_j * moved + _rows(hoi, dst, TRANS))
        if len(thetas) > 1:
            L_th = L_th + float(len(thetas)) * _set_variance(thetas, 1)
        n_target = len(rots) - 1
        if n_target:
            L_R = L_R + float(n_target) * _set_variance(rots, 2)
            L_t = L_t + float(n_target) * _set_variance(trans, 1)
    if terms:
        return L_s, L_th, L_R, L_t
    return L_s + L_th + L_R + L_t


def human_capsules(hoi_rows, codec: CodecParams, template=sk.TEMPLATE, radii=sk.DEFAULT_RADII):
    """Scene-frame capsules for HOI rows (..., 20).

    Pose embedding -> decoder -> FK -> proxy, then the row's similarity
    transform with the scale clamped below at ``MIN_SCALE`` (radii scale
    with it). Returns ``(A, B, r)`` of shapes (..., 24, 3) x2 and (..., 24).
    """
    lead = np.shape(ad.value(hoi_rows))[:-1]
    pose = decode_with(codec.tensors, ad.getitem(hoi_rows, (Ellipsis, POSE)))
    A, B = sk.proxy_segments(sk.pose_fk(pose, template))
    R = sample_rotations(hoi_rows, ROT)
    s = ad.maximum(ad.getitem(hoi_rows, (Ellipsis, slice(SCALE, SCALE + 1))), MIN_SCALE)
    t3 = ad.reshape(ad.getitem(hoi_rows, (Ellipsis, TRANS)), lead + (1, 3))
    s3 = ad.reshape(s, lead + (1, 1))
    Rt = ad.swapaxes(R, -1, -2)
    A_w = s3 * ad.matmul(A, Rt) + t3
    B_w = s3 * ad.matmul(B, Rt) + t3
    r = s * np.asarray(radii, dtype=np.float64)
    return A_w, B_w, r


def capsule_pair_overlap(A1, B1, r1, A2, B2, r2):
    """(..., 24, 24) overlaps ``max(0, r1_i + r2_j - d_ij)`` between two capsule sets."""

    def col(x):
        sh = np.shape(ad.value(x))
        return ad.reshape(x, sh[:-1] + (1,) + sh[-1:])

    def row(x):
        sh = np.shape(ad.value(x))
        return ad.reshape(x, sh[:-2] + (1,) + sh[-2:])

    def rcol(x):
        return ad.reshape(x, np.shape(ad.value(x)) + (1,))

    def rrow(x):
        sh = np.shape(ad.value(x))
        return ad.reshape(x, sh[:-1] + (1,) + sh[-1:])

    d = geo.segment_distance(col(A1), col(B1), row(A2), row(B2))
    return ad.relu(rcol(r1) + rrow(r2) - d)


def collision_loss(hoi, hhi, g: HhiGraph, codec: CodecParams, template=sk.TEMPLATE,
                   radii=sk.DEFAULT_RADII):  # fmt: skip
    """Sum over non-adjacent pairs of the mean (1/24^2) capsule overlap."""
    pairs = g.non_adjacent_pairs()
    lead = np.shape(ad.value(hoi))[:-2]
    if not pairs:
        return np.zeros(lead)
    A, B, r = human_capsules(hoi, codec, template, radii)
    pi = [p[0] for p in pairs]
    pj = [p[1] for p in pairs]

    def pick(x, idx):
        return ad.getitem(x, (Ellipsis, idx) + (slice(None),) * (np.ndim(ad.value(x)) - len(lead) - 1))

    ov = capsule_pair_overlap(pick(A, pi), pick(B, pi), pick(r, pi), pick(A, pj), pick(B, pj), pick(r, pj))
    total = ad.sum_(ad.sum_(ad.sum_(ov, axis=-1), axis=-1), axis=-1)
    return total / float(sk.N_CAPSULES**2)


# -- guided sampling ---------------------------------------------------------


@dataclass
class GuidanceConfig:
    lambda1_cap: float = 100000.0
    lambda1_coef: float = 100.0
    lambda2_cap: float = 1600000.0
    lambda2_coef: float = 1600.0
    t_guide: float = 0.5
    steps: int = 500
    # explicit guidance sub-steps: at most this much "lambda * dt" per sub-step ...
    guide_step_limit: float = 0.25
    # ... and at most this many sub-steps per ODE step (flow time is truncated beyond)
    max_substeps: int = 8
    # collision weight relative to which a sub-step is considered stiff
    collision_stiffness: float = 16.0
    # halvings tried before a sub-step is skipped for a scene that cannot descend
    max_backtracks: int = 30

    def __post_init__(self) -> None:
        for name in ("lambda1_cap", "lambda1_coef", "lambda2_cap", "lambda2_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.t_guide < 1:
            raise ValueError("t_guide must lie in (0, 1)")
        if self.steps < 1 or self.max_substeps < 1 or self.guide_step_limit <= 0:
            raise ValueError("steps, max_substeps and guide_step_limit must be positive")

    def lambda1(self, t: float) -> float:
        return min(self.lambda1_cap, self.lambda1_coef / t**2)

    def lambda2(self, t: float) -> float:
        return min(self.lambda2_cap, self.lambda2_coef / t**2)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneDraft:
    """Joint state of one scene: ``hoi`` (N, 20), ``hhi`` (M, 29) at time ``t``."""

    hoi: np.ndarray
    hhi: np.ndarray
    t: float
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)
    seed: int | None = None


def keyed_rng(seed: int, key: str) -> np.random.Generator:
    """Generator for one named sample; independent of how many others exist or their order."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def edge_key(g: HhiGraph, e: int) -> str:
    a, b = g.edges[e]
    return f"{g.keys[a]}->{g.keys[b]}"


def initial_draft(g: HhiGraph, sched: NoiseSchedule, seed: int) -> SceneDraft:
    """Every sample ~ sigma_max * N(0, I), each drawn from its own keyed stream."""
    hoi = np.stack([sched.sigma_max * keyed_rng(seed, k).standard_normal(20) for k in g.keys])
    hhi = np.zeros((0, 29))
    if g.edges:
        hhi = np.stack(
            [sched.sigma_max * keyed_rng(seed, edge_key(g, e)).standard_normal(29) for e in range(g.n_edges)]
        )
    return SceneDraft(hoi, hhi, 1.0, sched, seed)


def guidance_objective(hoi, hhi, g: HhiGraph, codec, w_inc: float, w_col: float,
                       template=sk.TEMPLATE, radii=sk.DEFAULT_RADII):  # fmt: skip
    """Per-scene ``w_inc * L_inc + w_col * L_col`` (shape = leading batch axes)."""
    total = np.zeros(np.shape(ad.value(hoi))[:-2])
    if w_inc > 0 and (g.n_humans > 1 or g.edges):
        total = total + w_inc * inconsistency_loss(hoi, hhi, g)
    if w_col > 0 and codec is not None and g.non_adjacent_pairs():
        total = total + w_col * collision_loss(hoi, hhi, g, codec, template, radii)
    return total


def guidance_gradients(hoi, hhi, g: HhiGraph, codec, w_inc: float, w_col: float,
                       template=sk.TEMPLATE, radii=sk.DEFAULT_RADII):  # fmt: skip
    """Per-scene objective values and its gradients w.r.t. (hoi, hhi)."""
    with ad.Tape() as tape:
        h = tape.watch(hoi)
        e = tape.watch(hhi)
        obj = guidance_objective(h, e, g, codec, w_inc, w_col, template, radii)
    if not isinstance(obj, ad.Var):
        return np.asarray(obj), np.zeros_like(hoi), np.zeros_like(hhi)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ad.UnreachedGradientWarning)
        gh, gr = tape.gradient(ad.sum_(obj), [h, e])
    return obj.data, gh, gr


def guided_sample(g: HhiGraph, hoi_net: ScoreNet, hhi_net: ScoreNet | None, codec: CodecParams | None,
                  cfg: GuidanceConfig | None = None, seed: int = 0, **kw) -> SceneDraft:  # fmt: skip
    """One composed scene; see :func:`guided_sample_batch`."""
    return guided_sample_batch(g, hoi_net, hhi_net, codec, cfg, [seed], **kw)[0]


def guided_sample_batch(g: HhiGraph, hoi_net: ScoreNet, hhi_net: ScoreNet | None,
                        codec: CodecParams | None, cfg: GuidanceConfig | None = None, seeds=(0,),
                        template=sk.TEMPLATE, radii=sk.DEFAULT_RADII, embed=None,
                        drafts: list[SceneDraft] | None = None) -> list[SceneDraft]:  # fmt: skip
    """Integrate N HOI and M HHI samples jointly for each seed, from t=1 to t=eps.

    Every ODE step first advances the score drift with RK4. For steps whose
    midpoint lies at or below ``cfg.t_guide`` it then follows the guidance
    flow ``d phi / d tau = -(lambda1 grad L_inc + lambda2 grad L_col)`` over
    the same interval with explicit sub-steps (:class:`GuidanceConfig`).
    Scenes in the batch are independent; they only share the arithmetic.
    """
    from .dataio import hash_embedding

    cfg = cfg or GuidanceConfig()
    validate_hhi_graph(g)
    sched = hoi_net.sched
    if g.edges:
        if hhi_net is None:
            raise ValueError("graph has HHI edges but no HHI network was given")
        if hhi_net.sched != sched:
            raise ValueError("HOI and HHI networks use different noise schedules")
    embed = embed or hash_embedding
    N, M = g.n_humans, g.n_edges
    seeds = list(seeds)
    drafts = drafts or [initial_draft(g, sched, s) for s in seeds]
    B = len(drafts)
    c_hoi = np.stack([embed(p, hoi_net.cond_dim) for p in (g.hoi_prompts or [""] * N)])
    c_hoi = np.tile(c_hoi, (B, 1))
    c_hhi = None
    if M:
        c_hhi = np.tile(np.stack([embed(p, hhi_net.cond_dim) for p in (g.edge_prompts or [""] * M)]), (B, 1))

    def drift(state, t):
        hoi, hhi = state.hoi, state.hhi
        k = -sched.sigma(t) * sched.sigma_dot(t)
        d_hoi = k * score_forward(hoi_net, hoi.reshape(B * N, 20), t, c_hoi).reshape(B, N, 20)
        d_hhi = hhi
        if M:
            d_hhi = k * score_forward(hhi_net, hhi.reshape(B * M, 29), t, c_hhi).reshape(B, M, 29)
        return _Pair(d_hoi, d_hhi)

    x = _Pair(np.stack([d.hoi for d in drafts]).astype(np.float64), np.stack([d.hhi for d in drafts]))
    trust = np.ones(B)
    ts = np.linspace(1.0, sched.eps, cfg.steps + 1)
    for k in range(cfg.steps):
        t0, t1 = ts[k], ts[k + 1]
        x = rk4_step(drift, x, t0, t1)
        if 0.5 * (t0 + t1) <= cfg.t_guide:
            x = _guidance_flow(x, g, codec, cfg, t0, t1, template, radii, trust)
        for arr, offset in ((x.hoi, 0), (x.hhi, N)):
            bad = np.argwhere(~np.isfinite(arr))
            if bad.size:
                b, i = int(bad[0][0]), int(bad[0][1])
                raise SamplerError(f"non-finite state in sample {offset + i} of scene {b} at t={t1:.6g}")
    return [
        SceneDraft(x.hoi[b].copy(), x.hhi[b].copy(), float(ts[-1]), sched, drafts[b].seed) for b in range(B)
    ]


class _Pair:
    """Two arrays that add and scale together, so RK4 can advance HOI and HHI state at once."""

    __slots__ = ("hoi", "hhi")

    def __init__(self, hoi, hhi):
        self.hoi, self.hhi = hoi, hhi

    def __add__(self, o):
        return _Pair(self.hoi + o.hoi, self.hhi + o.hhi)

    def __mul__(self, k):
        return _Pair(self.hoi * k, self.hhi * k)

    __rmul__ = __mul__


def _guidance_flow(x, g, codec, cfg: GuidanceConfig, t0: float, t1: float, template, radii, trust):
    h = t0 - t1
    lam = max(cfg.lambda1(t1), cfg.lambda2(t1) / cfg.collision_stiffness)
    if lam <= 0:
        return x
    K = int(min(cfg.max_substeps, max(1, math.ceil(lam * h / cfg.guide_step_limit))))
    delta = h / K
    hoi, hhi = x.hoi, x.hhi
    for j in range(K):
        t = t0 - (j + 0.5) * delta
        l1, l2 = cfg.lambda1(t), cfg.lambda2(t)
        ref = max(l1, l2 / cfg.collision_stiffness)
        tau = min(delta, cfg.guide_step_limit / ref) if ref > 0 else delta
        hoi, hhi = _descent_step(hoi, hhi, g, codec, l1, l2, tau, trust, cfg.max_backtracks, template, radii)
    return _Pair(hoi, hhi)


def _descent_step(hoi, hhi, g, codec, l1, l2, tau, trust, max_backtracks, template, radii):
    """One explicit guidance step with per-scene backtracking (sufficient decrease).

    ``trust`` holds each scene's step fraction in (0, 1]; it is updated in
    place (halved on every rejection, doubled after an accepted step) so the
    next sub-step starts near a step size that worked.
    """
    f0, gh, gr = guidance_gradients(hoi, hhi, g, codec, l1, l2, template, radii)
    if not (np.any(gh) or np.any(gr)):
        return hoi, hhi
    lead = (slice(None),) + (None,) * (hoi.ndim - 1)
    sq = (gh**2).reshape(len(hoi), -1).sum(1) + (gr**2).reshape(len(hhi), -1).sum(1)
    step = tau * trust
    new_hoi, new_hhi = hoi.copy(), hhi.copy()
    todo = sq > 0
    for _ in range(max_backtracks + 1):
        if not np.any(todo):
            break
        idx = np.flatnonzero(todo)
        ch = hoi[idx] - step[idx][lead] * gh[idx]
        cr = hhi[idx] - step[idx][lead] * gr[idx]
        f1 = np.asarray(guidance_objective(ch, cr, g, codec, l1, l2, template, radii))
        ok = np.isfinite(f1) & (f1 <= f0[idx] - 1e-4 * step[idx] * sq[idx])
        new_hoi[idx[ok]], new_hhi[idx[ok]] = ch[ok], cr[ok]
        todo[idx[ok]] = False
        trust[idx[~ok]] *= 0.5
        step[idx[~ok]] *= 0.5
    trust[~todo] = np.minimum(1.0, 2.0 * trust[~todo])
    trust[todo] = np.maximum(trust[todo], 2.0**-max_backtracks)
    return new_hoi, new_hhi


# -- scene reconstruction ----------------------------------------------------


def hhi_human_transform(ref: geo.SimilarityTransform, R_rel, t_rel) -> geo.SimilarityTransform:
    """Place the other human of an HHI sample given its reference human's transform.

    The other human shares the reference's scale; its rotation is
    ``R_ref R_rel`` and its translation ``s_ref R_ref t_rel + t_ref``.
    """
    R_rel = np.asarray(R_rel, dtype=np.float64)
    return geo.SimilarityTransform(
        ref.rotation @ R_rel, ref.scale * ref.rotation @ np.asarray(t_rel, dtype=np.float64) + ref.translation,
        ref.scale,
    )


@dataclass
class SceneHuman:
    key: str
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    pose: np.ndarray
    joints: np.ndarray
    capsules: np.ndarray  # (24, 7): a, b, radius
    scale_clamped: bool = False

    @property
    def transform(self) -> geo.SimilarityTransform:
        return geo.SimilarityTransform(self.rotation, self.translation, self.scale)

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
            "pose126": self.pose.tolist(),
            "joints22": self.joints.tolist(),
            "capsules24": [
                {"a": c[:3].tolist(), "b": c[3:6].tolist(), "radius": float(c[6])} for c in self.capsules
            ],
            "scale_clamped": self.scale_clamped,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneHuman":
        caps = np.array([list(c["a"]) + list(c["b"]) + [c["radius"]] for c in d["capsules24"]], dtype=float)
        return cls(
            d["key"],
            np.asarray(d["rotation"], dtype=float).reshape(3, 3),
            np.asarray(d["translation"], dtype=float),
            float(d["scale"]),
            np.asarray(d["pose126"], dtype=float),
            np.asarray(d["joints22"], dtype=float),
            caps.reshape(sk.N_CAPSULES, 7),
            bool(d.get("scale_clamped", False)),
        )


@dataclass
class Scene:
    humans: list[SceneHuman]
    edges: list[dict]
    object: dict | None = None
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "object": self.object,
            "humans": [h.to_json() for h in self.humans],
            "edges": self.edges,
            "diagnostics": self.diagnostics,
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(
            [SceneHuman.from_json(h) for h in d["humans"]],
            list(d.get("edges", [])),
            d.get("object"),
            dict(d.get("diagnostics", {})),
            dict(d.get("config", {})),
        )

    def capsules(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        caps = np.stack([h.capsules for h in self.humans])
        return caps[..., :3], caps[..., 3:6], caps[..., 6]


def reconstruct_scene(draft: SceneDraft, g: HhiGraph, codec: CodecParams, template=sk.TEMPLATE,
                      radii=sk.DEFAULT_RADII, obj: dict | None = None, config: dict | None = None) -> Scene:  # fmt: skip
    """Final scene from a converged draft, each human taken from its HOI sample.

    Every HHI edge also implies a placement of its non-reference human; the
    gap to the HOI-derived placement is reported in ``diagnostics``.
    """
    hoi, hhi = np.asarray(draft.hoi), np.asarray(draft.hhi)
    humans: list[SceneHuman] = []
    transforms = []
    for i in range(g.n_humans):
        row = hoi[i]
        R = geo.gram_schmidt(geo.regularize_rot6d(row[ROT]))
        s_raw = float(row[SCALE])
        s = max(s_raw, MIN_SCALE)
        if s_raw < MIN_SCALE:
            warnings.warn(f"human {g.keys[i]}: scale {s_raw:.4g} clamped to {MIN_SCALE}", stacklevel=2)
        tf = geo.SimilarityTransform(R, row[TRANS].copy(), s)
        pose = decode_with(codec.tensors, row[POSE])
        joints = tf.apply(sk.pose_fk(pose, template))
        A, B = sk.proxy_segments(sk.pose_fk(pose, template))
        caps = np.concatenate([tf.apply(A), tf.apply(B), s * np.asarray(radii)[:, None]], axis=1)
        humans.append(SceneHuman(g.keys[i], R, row[TRANS].copy(), s, pose, joints, caps, s_raw < MIN_SCALE))
        transforms.append(tf)
    residuals = []
    for e, (src, dst) in enumerate(g.edges):
        R_rel = geo.gram_schmidt(geo.regularize_rot6d(hhi[e, HHI_ROT]))
        est = hhi_human_transform(transforms[dst], R_rel, hhi[e, HHI_TRANS])
        own = transforms[src]
        residuals.append(
            {
                "edge": [src, dst],
                "rotation_deg": float(np.degrees(geo.geodesic_angle(est.rotation, own.rotation))),
                "translation": float(np.linalg.norm(est.translation - own.translation)),
                "pose_ref": float(np.linalg.norm(hhi[e, HHI_POSE_REF] - hoi[dst, POSE])),
                "pose_other": float(np.linalg.norm(hhi[e, HHI_POSE_OTHER] - hoi[src, POSE])),
            }
        )
    L_inc = float(inconsistency_loss(hoi, hhi, g))
    L_col = float(collision_loss(hoi, hhi, g, codec, template, radii))
    edges = [
        {"from": a, "to": b, "prompt": (g.edge_prompts or [""] * g.n_edges)[k]} for k, (a, b) in enumerate(g.edges)
    ]
    diagnostics = {"inconsistency_loss": L_inc, "collision_loss": L_col, "edge_residuals": residuals}
    return Scene(humans, edges, obj, diagnostics, dict(config or {}))
