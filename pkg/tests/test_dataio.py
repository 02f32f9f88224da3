import json

import numpy as np
import pytest
from scipy.cluster.vq import kmeans2
from scipy.spatial.transform import Rotation

from hhoi import dataio
from hhoi import geometry as geo
from hhoi import pose_codec as pc
from hhoi import skeleton as sk


def make_record(obj_R=np.eye(3), obj_t=np.zeros(3), humans=None):
    if humans is None:
        R = Rotation.random(2, random_state=0).as_matrix()
        humans = [
            dataio.HumanRecord(0, R[0], np.array([0.3, 0.1, -0.2]), 1.1, sk.identity_pose()),
            dataio.HumanRecord(1, R[1], np.array([-0.5, 0.0, 0.7]), 0.9, dataio.posture_pose("sit")),
        ]
    return dataio.HhoiRecord("f0", "bench", obj_R, obj_t, "bench.obj", humans, {"hoi": "sit", "hhi": "pair"})


# -- hoi extraction ----------------------------------------------------------


def test_identity_object_passes_human_through(random_codec):
    rec = make_record()
    out = dataio.extract_hoi(rec, random_codec)
    assert len(out) == 2
    for (vec, prompt), h in zip(out, rec.humans):
        assert prompt == "sit"
        np.testing.assert_allclose(geo.rot6d_to_matrix(vec[:6]), h.rotation, atol=1e-12)
        np.testing.assert_allclose(vec[6:9], h.translation, atol=1e-15)
        assert vec[9] == h.scale
        np.testing.assert_allclose(vec[10:], pc.encode(h.pose, random_codec), rtol=1e-12, atol=1e-12)


def test_rotated_object_inverts_translation(random_codec):
    Rz = geo.axis_rotation("z", 90.0)
    rec = make_record(obj_R=Rz)
    out = dataio.extract_hoi(rec, random_codec)
    for (vec, _), h in zip(out, rec.humans):
        np.testing.assert_allclose(vec[6:9], geo.axis_rotation("z", -90.0) @ h.translation, atol=1e-12)
        assert vec[9] == h.scale


def test_object_frame_roundtrip(random_codec):
    R_o = Rotation.random(random_state=3).as_matrix()
    t_o = np.array([1.0, -2.0, 0.5])
    rec = make_record(R_o, t_o)
    obj = geo.SimilarityTransform(R_o, t_o, 1.0)
    for (vec, _), h in zip(dataio.extract_hoi(rec, random_codec), rec.humans):
        local = geo.SimilarityTransform(geo.rot6d_to_matrix(vec[:6]), vec[6:9], vec[9])
        world = obj.compose(local)
        np.testing.assert_allclose(world.rotation, h.rotation, atol=1e-10)
        np.testing.assert_allclose(world.translation, h.translation, atol=1e-10)
        assert world.scale == pytest.approx(h.scale, abs=1e-12)


def test_non_orthonormal_object_is_rejected(random_codec):
    rec = make_record(obj_R=np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(dataio.RecordError, match="object rotation"):
        dataio.extract_hoi(rec, random_codec)


# -- hhi extraction ----------------------------------------------------------


def test_reference_at_origin_gives_raw_parameters(random_codec):
    R1 = Rotation.random(random_state=1).as_matrix()
    humans = [
        dataio.HumanRecord(0, np.eye(3), np.zeros(3), 1.0, sk.identity_pose()),
        dataio.HumanRecord(1, R1, np.array([0.4, 0.0, 0.9]), 1.0, sk.identity_pose()),
    ]
    vec, _ = dataio.extract_hhi(make_record(humans=humans), random_codec)[0]
    np.testing.assert_allclose(geo.rot6d_to_matrix(vec[10:16]), R1, atol=1e-12)
    np.testing.assert_allclose(vec[16:19], [0.4, 0.0, 0.9], atol=1e-15)


def test_swapped_pair_inverts_relative_transform(random_codec):
    rec = make_record()
    (ab, _), (ba, _) = dataio.extract_hhi(rec, random_codec)
    s_a, s_b = rec.humans[0].scale, rec.humans[1].scale
    # other-in-ref transforms carry the scale ratio implicitly
    T_ab = geo.SimilarityTransform(geo.rot6d_to_matrix(ab[10:16]), ab[16:19], s_b / s_a)
    T_ba = geo.SimilarityTransform(geo.rot6d_to_matrix(ba[10:16]), ba[16:19], s_a / s_b)
    both = T_ab.compose(T_ba)
    np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(both.translation, np.zeros(3), atol=1e-10)
    assert both.scale == pytest.approx(1.0)
    np.testing.assert_array_equal(ab[:10], ba[19:])


def test_dyad_gives_two_samples_and_single_human_none(random_codec):
    rec = make_record()
    assert len(dataio.extract_hhi(rec, random_codec)) == 2
    single = make_record(humans=rec.humans[:1])
    with pytest.warns(UserWarning, match="fewer than 2"):
        assert dataio.extract_hhi(single, random_codec) == []


# -- splitting ---------------------------------------------------------------


def test_split_ratio_and_partition():
    items = list(range(100))
    train, test = dataio.split_dataset(items, seed=4)
    assert (len(train), len(test)) == (90, 10)
    assert set(train) | set(test) == set(items)
    assert not set(train) & set(test)
    assert dataio.split_dataset(items, seed=4) == (train, test)
    assert dataio.split_dataset(items, seed=5) != (train, test)


def test_split_arrays_and_small_inputs():
    arr = np.arange(30).reshape(15, 2)
    train, test = dataio.split_dataset(arr)
    assert train.shape == (13, 2) and test.shape == (2, 2)
    with pytest.raises(ValueError, match="10"):
        dataio.split_dataset(list(range(9)))


# -- toy generators ----------------------------------------------------------


def test_noise_free_frames_are_identical():
    recs = dataio.gen_toy_dataset("board", 3, noise=0.0, seed=2)
    a = recs[0].to_json()
    for r in recs[1:]:
        b = r.to_json()
        b["frame_id"] = a["frame_id"]
        assert b == a


def test_bench_mean_separation():
    recs = dataio.gen_toy_dataset("bench", 2000, noise=0.05, seed=0)
    d = []
    for rec in recs:
        R_o, t_o = rec.object_rotation, rec.object_translation
        t0, t1 = (R_o.T @ (h.translation - t_o) for h in rec.humans)
        d.append(np.linalg.norm(t0 - t1))
    # lateral noise on both humans: std of the gap is about 0.05 * sqrt(2)
    assert np.mean(d) == pytest.approx(0.90, abs=4 * 0.05 * np.sqrt(2) / np.sqrt(2000) + 2e-3)
    np.testing.assert_allclose(dataio.expected_separation("bench"), [0, 0, 0.9])


@pytest.mark.parametrize("scenario", dataio.SCENARIOS)
def test_toy_records_feed_the_pipeline(scenario, random_codec):
    recs = dataio.gen_toy_dataset(scenario, 5, seed=1)
    X, C = dataio.training_arrays(recs, random_codec, "HOI", dim=8)
    assert X.shape == (10, 20) and C.shape == (10, 8)
    X, _ = dataio.training_arrays(recs, random_codec, "HHI")
    assert X.shape == (10, 29)


def test_toy_poses_are_valid_and_bounded():
    poses, labels = dataio.gen_toy_poses(200, seed=0, return_labels=True)
    sk.forward_kinematics(poses)
    for pose, lab in zip(poses, labels):
        R = geo.rot6d_to_matrix(pose.reshape(21, 6))
        base = dataio.base_rotations(dataio.POSTURES[lab])
        assert np.degrees(geo.geodesic_angle(base, R)).max() <= 25.0


def test_toy_poses_have_three_modes():
    poses, labels = dataio.gen_toy_poses(600, seed=1, return_labels=True)

    def inertia(k):
        centers, assign = kmeans2(poses, k, seed=0, minit="++")
        return np.sum((poses - centers[assign]) ** 2), assign

    i1, _ = inertia(1)
    i3, assign = inertia(3)
    assert i3 < 0.2 * i1
    purity = sum(np.bincount(labels[assign == c]).max() for c in np.unique(assign)) / len(labels)
    assert purity > 0.99


def test_toy_poses_are_seeded():
    np.testing.assert_array_equal(dataio.gen_toy_poses(5, seed=3), dataio.gen_toy_poses(5, seed=3))
    assert not np.array_equal(dataio.gen_toy_poses(5, seed=3), dataio.gen_toy_poses(5, seed=4))


# -- prompts -----------------------------------------------------------------


def test_single_paraphrase_is_always_chosen():
    table = dataio.PromptTable({"k": ["only"]})
    rng = np.random.default_rng(0)
    assert {dataio.sample_prompt(table, "k", rng)[0] for _ in range(20)} == {"only"}
    with pytest.raises(ValueError, match="unknown"):
        dataio.sample_prompt(table, "missing", rng)


def test_hash_embedding_is_unit_and_deterministic():
    a = dataio.hash_embedding("two people sit")
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_array_equal(a, dataio.hash_embedding("two people sit"))
    assert not np.allclose(a, dataio.hash_embedding("two people stand"))


def test_paraphrase_draws_are_uniform():
    texts = ["a", "b", "c", "d"]
    table = dataio.PromptTable({"k": texts})
    rng = np.random.default_rng(11)
    n = 10_000
    draws = [dataio.sample_prompt(table, "k", rng, dim=4)[0] for _ in range(n)]
    sigma = np.sqrt(0.25 * 0.75 / n)
    for t in texts:
        assert abs(draws.count(t) / n - 0.25) < 3 * sigma


def test_external_embeddings(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"k": ["x", "y"]}))
    (tmp_path / "e.json").write_text(json.dumps({"x": [1.0, 0.0, 0.0]}))
    table = dataio.PromptTable.load(tmp_path / "p.json", tmp_path / "e.json")
    np.testing.assert_array_equal(table.embed("x"), [1.0, 0.0, 0.0])
    assert table.embed("y", 3).shape == (3,)
    with pytest.raises(ValueError):
        dataio.PromptTable({"k": []})
    with pytest.raises(ValueError, match="dimensions"):
        dataio.PromptTable({"k": ["x"]}, {"x": [1.0], "y": [1.0, 2.0]})


# -- files -------------------------------------------------------------------


def test_records_roundtrip(tmp_path):
    recs = dataio.gen_toy_dataset("carry", 4, seed=2)
    dataio.save_records(tmp_path / "d.jsonl", recs)
    back = dataio.load_records(tmp_path / "d.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]


@pytest.mark.parametrize(
    "mutate, msg",
    [
        (lambda d: d["humans"][0].update(rotation=[[1, 0, 0], [0, 1, 0], [0, 0, 2]]), "rotation"),
        (lambda d: d["humans"][0].update(scale=-1.0), "scale"),
        (lambda d: d["humans"][0].update(pose=[0.0] * 5), "pose"),
        (lambda d: d.pop("object"), "malformed"),
        (lambda d: d.update(humans=[]), "no humans"),
    ],
)
def test_malformed_lines_are_numbered(tmp_path, mutate, msg):
    good = dataio.gen_toy_dataset("bench", 2, seed=0)
    bad = good[1].to_json()
    mutate(bad)
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(good[0].to_json()) + "\n\n" + json.dumps(bad) + "\n")
    with pytest.raises(dataio.RecordError, match=f"d.jsonl:3: .*{msg}"):
        dataio.load_records(path)


def test_invalid_json_is_numbered(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(dataio.RecordError, match=":1: invalid JSON"):
        dataio.load_records(path)
