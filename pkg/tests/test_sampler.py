import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from hhoi import dataio
from hhoi import diffusion as df
from hhoi import geometry as geo
from hhoi import pose_codec as pc
from hhoi import sampler as sp
from hhoi import skeleton as sk
from hhoi.numerics import autograd as ad

from conftest import central_difference, relative_error

SCHED = df.NoiseSchedule()


# -- graphs ------------------------------------------------------------------


def test_cyclic_graph_is_rejected():
    with pytest.raises(sp.GraphError, match="cyclic"):
        sp.validate_hhi_graph(sp.HhiGraph(3, [(1, 0), (2, 1), (0, 2)]))


def test_chain_and_empty_graphs_are_valid():
    sp.validate_hhi_graph(sp.HhiGraph(3, [(1, 0), (2, 1)]))
    g = sp.HhiGraph(3, [])
    sp.validate_hhi_graph(g)
    assert g.non_adjacent_pairs() == [(0, 1), (0, 2), (1, 2)]


@pytest.mark.parametrize(
    "n, edges, msg",
    [
        (2, [(0, 0)], "self-edge"),
        (2, [(0, 1), (1, 0)], "edges exceed"),
        (3, [(0, 1), (1, 0)], "duplicate"),
        (2, [(0, 2)], "missing"),
    ],
)
def test_graph_errors(n, edges, msg):
    with pytest.raises(sp.GraphError, match=msg):
        sp.validate_hhi_graph(sp.HhiGraph(n, edges))


def test_prompt_counts_are_checked():
    with pytest.raises(sp.GraphError, match="hoi_prompts"):
        sp.validate_hhi_graph(sp.HhiGraph(2, [], hoi_prompts=["a"]))


# -- PF ODE ------------------------------------------------------------------


def gaussian_score(s=1.0):
    return lambda x, t: -x / (s**2 + SCHED.sigma(t) ** 2)


def test_pf_ode_matches_closed_form():
    out = sp.pf_ode_sample(gaussian_score(), SCHED, steps=500, x1=np.array([10.0]))
    exact = 10.0 * math.sqrt((1 + SCHED.sigma(SCHED.eps) ** 2) / (1 + 100.0))
    assert exact == pytest.approx(0.9951, abs=1e-4)
    assert abs(out[0] - exact) < 1e-3


def test_pf_ode_step_refinement():
    a = sp.pf_ode_sample(gaussian_score(), SCHED, steps=250, x1=np.array([10.0]))
    b = sp.pf_ode_sample(gaussian_score(), SCHED, steps=500, x1=np.array([10.0]))
    assert abs(a[0] - b[0]) < 1e-4


def test_zero_score_leaves_state_unchanged():
    x1 = np.random.default_rng(0).normal(size=7)
    out = sp.pf_ode_sample(lambda x, t: np.zeros_like(x), SCHED, steps=50, x1=x1)
    np.testing.assert_array_equal(out, x1)


def test_blow_up_reports_step():
    with pytest.raises(sp.SamplerError, match="step 0"):
        sp.pf_ode_sample(lambda x, t: np.full_like(x, np.inf), SCHED, steps=5, x1=np.ones(2))


# -- inconsistency loss ------------------------------------------------------


def rot6d(R):
    return np.concatenate([R[:, 0], R[:, 1]])


def gs(v):
    """Plain Gram-Schmidt on one 6D vector."""
    a, b = v[:3], v[3:]
    c0 = a / np.linalg.norm(a)
    c1 = b - (c0 @ b) * c0
    c1 /= np.linalg.norm(c1)
    return np.column_stack([c0, c1, np.cross(c0, c1)])


def var(xs):
    X = np.array(xs, dtype=float).reshape(len(xs), -1)
    return np.sum((X - X.mean(0)) ** 2) / len(xs)


def reference_inconsistency(hoi, hhi, edges):
    """Straightforward evaluation: collect every estimate of every human, then take variances."""
    N = len(hoi)
    total = N * var([h[9] for h in hoi])
    for i in range(N):
        poses = [hoi[i][10:20]]
        rots = [gs(hoi[i][:6])]
        trans = [hoi[i][6:9]]
        for e, (src, dst) in enumerate(edges):
            if dst == i:
                poses.append(hhi[e][0:10])
            if src == i:
                poses.append(hhi[e][19:29])
                Rj, tj, sj = gs(hoi[dst][:6]), hoi[dst][6:9], hoi[dst][9]
                rots.append(Rj @ gs(hhi[e][10:16]))
                trans.append(sj * Rj @ hhi[e][16:19] + tj)
        if len(poses) > 1:
            total += len(poses) * var(poses)
        if len(rots) > 1:
            total += (len(rots) - 1) * (var(rots) + var(trans))
    return total


def consistent_draft(rng, N, edges):
    hoi = np.zeros((N, 20))
    s = rng.uniform(0.8, 1.2)
    for i in range(N):
        hoi[i, :6] = rot6d(Rotation.random(random_state=rng.integers(1 << 30)).as_matrix())
        hoi[i, 6:9] = rng.normal(size=3)
        hoi[i, 9] = s
        hoi[i, 10:] = rng.normal(size=10)
    hhi = np.zeros((len(edges), 29))
    for e, (src, dst) in enumerate(edges):
        Rd, Rs = gs(hoi[dst, :6]), gs(hoi[src, :6])
        hhi[e, 0:10] = hoi[dst, 10:]
        hhi[e, 10:16] = rot6d(Rd.T @ Rs)
        hhi[e, 16:19] = Rd.T @ (hoi[src, 6:9] - hoi[dst, 6:9]) / s
        hhi[e, 19:29] = hoi[src, 10:]
    return hoi, hhi


def test_consistent_draft_has_zero_inconsistency():
    edges = [(1, 0), (2, 1)]
    hoi, hhi = consistent_draft(np.random.default_rng(0), 3, edges)
    assert float(sp.inconsistency_loss(hoi, hhi, sp.HhiGraph(3, edges))) < 1e-10


def test_scale_term_arithmetic():
    hoi = np.zeros((2, 20))
    hoi[:, :6] = rot6d(np.eye(3))
    hoi[:, 9] = [1.0, 1.2]
    L_s, L_th, L_R, L_t = sp.inconsistency_loss(hoi, np.zeros((0, 29)), sp.HhiGraph(2), terms=True)
    assert float(L_s) == pytest.approx(0.02, abs=1e-14)
    assert float(L_th) == float(L_R) == float(L_t) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_inconsistency_matches_reference(seed):
    rng = np.random.default_rng(seed)
    edges = [(1, 0), (2, 1), (3, 0)]
    hoi, hhi = rng.normal(size=(4, 20)), rng.normal(size=(3, 29))
    got = float(sp.inconsistency_loss(hoi, hhi, sp.HhiGraph(4, edges)))
    assert got == pytest.approx(reference_inconsistency(hoi, hhi, edges), rel=1e-12, abs=1e-12)


def test_inconsistency_is_batched():
    rng = np.random.default_rng(9)
    g = sp.HhiGraph(3, [(1, 0)])
    hoi, hhi = rng.normal(size=(5, 3, 20)), rng.normal(size=(5, 1, 29))
    batch = sp.inconsistency_loss(hoi, hhi, g)
    for b in range(5):
        assert batch[b] == pytest.approx(float(sp.inconsistency_loss(hoi[b], hhi[b], g)), rel=1e-13)


# -- collision loss ----------------------------------------------------------


def placed_row(t, pose_emb, s=1.0, R=np.eye(3)):
    row = np.zeros(20)
    row[:6] = rot6d(R)
    row[6:9] = t
    row[9] = s
    row[10:] = pose_emb
    return row


def brute_force_collision(rows, pairs, codec):
    caps = []
    for row in rows:
        A, B = sk.proxy_segments(sk.forward_kinematics(pc.decode(row[10:], codec)))
        R, t, s = gs(row[:6]), row[6:9], max(row[9], sp.MIN_SCALE)
        caps.append((s * A @ R.T + t, s * B @ R.T + t, s * sk.DEFAULT_RADII))
    total = 0.0
    for i, j in pairs:
        Ai, Bi, ri = caps[i]
        Aj, Bj, rj = caps[j]
        for a in range(24):
            for b in range(24):
                d = float(geo.segment_distance(Ai[a], Bi[a], Aj[b], Bj[b]))
                total += max(0.0, ri[a] + rj[b] - d)
    return total / 576.0


@pytest.fixture(scope="module")
def tpose_codec():
    codec = pc.CodecParams.zeros()
    codec.tensors["dec.3.b"] = sk.identity_pose()
    return codec


def test_far_apart_humans_do_not_collide(random_codec):
    emb = np.random.default_rng(0).normal(size=10)
    hoi = np.stack([placed_row(np.zeros(3), emb), placed_row([10.0, 0, 0], emb)])
    assert float(sp.collision_loss(hoi, np.zeros((0, 29)), sp.HhiGraph(2), random_codec)) == 0.0


def test_coincident_humans_match_brute_force(tpose_codec, random_codec):
    for codec in (tpose_codec, random_codec):
        emb = np.random.default_rng(1).normal(size=10)
        hoi = np.stack([placed_row(np.zeros(3), emb, 1.1)] * 2)
        got = float(sp.collision_loss(hoi, np.zeros((0, 29)), sp.HhiGraph(2), codec))
        assert got > 0
        assert got == pytest.approx(brute_force_collision(hoi, [(0, 1)], codec), rel=1e-12, abs=1e-12)


def test_collision_of_three_humans_matches_brute_force(random_codec):
    rng = np.random.default_rng(2)
    R = Rotation.random(3, random_state=3).as_matrix()
    hoi = np.stack([placed_row(0.2 * rng.normal(size=3), rng.normal(size=10), 0.9 + 0.1 * k, R[k]) for k in range(3)])
    g = sp.HhiGraph(3, [(1, 0)])
    got = float(sp.collision_loss(hoi, np.zeros((1, 29)), g, random_codec))
    assert got == pytest.approx(brute_force_collision(hoi, [(0, 2), (1, 2)], random_codec), rel=1e-12, abs=1e-12)


def test_edge_removes_collision_term(tpose_codec):
    hoi = np.stack([placed_row(np.zeros(3), np.zeros(10))] * 2)
    assert float(sp.collision_loss(hoi, np.zeros((1, 29)), sp.HhiGraph(2, [(1, 0)]), tpose_codec)) == 0.0


# -- guidance ----------------------------------------------------------------


def test_lambda_schedules():
    cfg = sp.GuidanceConfig()
    assert cfg.lambda1(0.5) == pytest.approx(400.0)
    assert cfg.lambda2(0.1) == pytest.approx(160000.0)
    assert cfg.lambda1(1e-4) == 100000.0


def test_guidance_config_checks():
    with pytest.raises(ValueError):
        sp.GuidanceConfig(lambda1_cap=-1)
    with pytest.raises(ValueError):
        sp.GuidanceConfig(t_guide=1.0)


@pytest.mark.parametrize("seed", [1, 3, 10])
def test_guidance_gradient_matches_finite_differences(random_codec, seed):
    rng = np.random.default_rng(seed)
    g = sp.HhiGraph(3, [(1, 0)])
    R = Rotation.random(3, random_state=seed + 1).as_matrix()
    hoi = np.stack([placed_row(0.15 * rng.normal(size=3), rng.normal(size=10), 1.0 + 0.1 * k, R[k]) for k in range(3)])
    hoi += 0.05 * rng.normal(size=hoi.shape)
    hhi = rng.normal(size=(1, 29))

    def f(h, e):
        return sp.guidance_objective(h, e, g, random_codec, 1.0, 50.0)

    with ad.Tape() as tape:
        hv, ev = tape.watch(hoi), tape.watch(hhi)
        out = f(hv, ev)
    gh, ge = tape.gradient(out, [hv, ev])
    assert float(sp.collision_loss(hoi, hhi, g, random_codec)) > 0
    if tape.kink_margin < 1e-4:
        pytest.skip("draw too close to a kink for finite differences")
    assert relative_error(gh, central_difference(lambda x: float(f(x, hhi)), hoi)) < 1e-4
    assert relative_error(ge, central_difference(lambda x: float(f(hoi, x)), hhi)) < 1e-4


def small_net(mode, seed):
    net = df.ScoreNet.init(mode, 8, seed=seed, trunk=16, head_hidden=8)
    rng = np.random.default_rng(seed + 100)
    for k, v in net.tensors.items():
        if k not in df.BUFFERS:
            net.tensors[k] = v + 0.2 * rng.normal(size=v.shape) / df.PARAM_SCALE
    return net


def test_unguided_scene_equals_independent_pf_ode():
    net = small_net("HOI", 0)
    cfg = sp.GuidanceConfig(lambda1_cap=0, lambda2_cap=0, steps=20)
    g = sp.HhiGraph(2, [], hoi_prompts=["sit", "lie"])
    draft = sp.guided_sample(g, net, None, None, cfg, seed=7)
    for i, prompt in enumerate(g.hoi_prompts):
        x1 = SCHED.sigma_max * sp.keyed_rng(7, g.keys[i]).standard_normal(20)
        ref = sp.pf_ode_sample(net, SCHED, steps=20, cond=dataio.hash_embedding(prompt, 8), x1=x1)
        np.testing.assert_allclose(draft.hoi[i], ref, rtol=1e-12, atol=1e-12)


def test_single_human_reduces_to_pf_ode(random_codec):
    net = small_net("HOI", 1)
    draft = sp.guided_sample(sp.HhiGraph(1), net, None, random_codec, sp.GuidanceConfig(steps=20), seed=3)
    x1 = SCHED.sigma_max * sp.keyed_rng(3, "H0").standard_normal(20)
    ref = sp.pf_ode_sample(net, SCHED, steps=20, cond=dataio.hash_embedding("", 8), x1=x1)
    np.testing.assert_array_equal(draft.hoi[0], ref)


def test_batch_of_seeds_matches_single_runs(random_codec):
    hoi_net, hhi_net = small_net("HOI", 2), small_net("HHI", 3)
    g = sp.HhiGraph(3, [(1, 0)])
    cfg = sp.GuidanceConfig(steps=12)
    batch = sp.guided_sample_batch(g, hoi_net, hhi_net, random_codec, cfg, seeds=[4, 5])
    single = sp.guided_sample(g, hoi_net, hhi_net, random_codec, cfg, seed=5)
    np.testing.assert_allclose(batch[1].hoi, single.hoi, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(batch[1].hhi, single.hhi, rtol=1e-9, atol=1e-9)
    assert batch[1].seed == 5


def test_relabelling_humans_permutes_the_output(random_codec):
    hoi_net, hhi_net = small_net("HOI", 4), small_net("HHI", 5)
    cfg = sp.GuidanceConfig(steps=12)
    g = sp.HhiGraph(3, [(1, 0), (2, 1)], ["a", "b", "c"], ["x", "y"], keys=["p", "q", "r"])
    perm = [2, 1, 0]  # new index -> old index
    inv = {old: new for new, old in enumerate(perm)}
    h = sp.HhiGraph(
        3,
        [(inv[2], inv[1]), (inv[1], inv[0])],
        [g.hoi_prompts[k] for k in perm],
        ["y", "x"],
        keys=[g.keys[k] for k in perm],
    )
    a = sp.guided_sample(g, hoi_net, hhi_net, random_codec, cfg, seed=1)
    b = sp.guided_sample(h, hoi_net, hhi_net, random_codec, cfg, seed=1)
    np.testing.assert_allclose(b.hoi, a.hoi[perm], rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(b.hhi, a.hhi[::-1], rtol=1e-8, atol=1e-8)


def test_hhi_edges_need_a_network():
    with pytest.raises(ValueError, match="HHI network"):
        sp.guided_sample(sp.HhiGraph(2, [(1, 0)]), small_net("HOI", 0), None, None, sp.GuidanceConfig(steps=1))


# -- scene reconstruction ----------------------------------------------------


def draft_of(rows, hhi=None):
    return sp.SceneDraft(np.stack(rows), np.zeros((0, 29)) if hhi is None else hhi, SCHED.eps)


def test_identity_transform_keeps_canonical_joints(random_codec):
    emb = np.random.default_rng(0).normal(size=10)
    scene = sp.reconstruct_scene(draft_of([placed_row(np.zeros(3), emb)]), sp.HhiGraph(1), random_codec)
    canon = sk.forward_kinematics(pc.decode(emb, random_codec))
    np.testing.assert_allclose(scene.humans[0].joints, canon, atol=1e-12)


def test_scale_and_translation_arithmetic(tpose_codec):
    scene = sp.reconstruct_scene(draft_of([placed_row([1.0, 0, 0], np.zeros(10), 2.0)]), sp.HhiGraph(1), tpose_codec)
    np.testing.assert_allclose(scene.humans[0].transform.apply(np.array([0.0, 1.0, 0.0])), [1.0, 2.0, 0.0])
    canon = sk.forward_kinematics(sk.identity_pose())
    np.testing.assert_allclose(scene.humans[0].joints, 2 * canon + [1.0, 0, 0], atol=1e-12)


def test_hhi_placement_is_transform_composition():
    rng = np.random.default_rng(3)
    R = Rotation.random(2, random_state=4).as_matrix()
    ref = geo.SimilarityTransform(R[0], rng.normal(size=3), 1.3)
    t_rel = rng.normal(size=3)
    got = sp.hhi_human_transform(ref, R[1], t_rel)
    want = ref.compose(geo.SimilarityTransform(R[1], t_rel, 1.0))
    np.testing.assert_allclose(got.rotation, want.rotation, atol=1e-12)
    np.testing.assert_allclose(got.translation, want.translation, atol=1e-12)
    assert got.scale == want.scale
    p = rng.normal(size=3)
    np.testing.assert_allclose(got.apply(p), ref.apply(R[1] @ p + t_rel), atol=1e-12)


def test_consistent_draft_has_zero_residuals(random_codec):
    edges = [(1, 0)]
    hoi, hhi = consistent_draft(np.random.default_rng(5), 2, edges)
    scene = sp.reconstruct_scene(sp.SceneDraft(hoi, hhi, SCHED.eps), sp.HhiGraph(2, edges), random_codec)
    res = scene.diagnostics["edge_residuals"][0]
    assert res["rotation_deg"] < 1e-5 and res["translation"] < 1e-10
    assert res["pose_ref"] == res["pose_other"] == 0.0
    assert scene.diagnostics["inconsistency_loss"] < 1e-10


def test_small_scale_is_clamped_with_warning(tpose_codec):
    with pytest.warns(UserWarning, match="clamped"):
        scene = sp.reconstruct_scene(draft_of([placed_row(np.zeros(3), np.zeros(10), 0.01)]), sp.HhiGraph(1), tpose_codec)
    assert scene.humans[0].scale == sp.MIN_SCALE and scene.humans[0].scale_clamped


def test_scene_json_roundtrip(random_codec):
    hoi, hhi = consistent_draft(np.random.default_rng(6), 2, [(1, 0)])
    scene = sp.reconstruct_scene(sp.SceneDraft(hoi, hhi, SCHED.eps), sp.HhiGraph(2, [(1, 0)]), random_codec,
                                 obj={"path": "box.obj"}, config={"steps": 3})  # fmt: skip
    text = json.dumps(scene.to_json())
    back = sp.Scene.from_json(json.loads(text))
    assert json.dumps(back.to_json()) == text
    A, B, r = back.capsules()
    assert A.shape == (2, 24, 3) and r.shape == (2, 24)
