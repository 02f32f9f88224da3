import json

import numpy as np
import pytest

from hhoi import cli, dataio
from hhoi import diffusion as df
from hhoi import sampler as sp
from hhoi import skeleton as sk
from hhoi.pose_codec import CodecParams


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A minimal but complete pipeline: toy data, codec, HOI and HHI networks."""
    d = tmp_path_factory.mktemp("pipeline")
    assert run("gen-toy", "--scenario", "bench", "--frames", 40, "--seed", 1, "--out", d / "bench.jsonl") == 0
    assert run("train-codec", "--toy-poses", 1000, "--epochs", 2, "--seed", 0, "--out", d / "codec.ckpt") == 0
    for mode in ("HOI", "HHI"):
        rc = run("train-score", "--mode", mode, "--data", d / "bench.jsonl", "--codec", d / "codec.ckpt",
                 "--epochs", 3, "--batch-size", 20, "--trunk", 16, "--head-hidden", 8, "--seed", 0,
                 "--out", d / f"{mode.lower()}.ckpt")  # fmt: skip
        assert rc == 0
    return d


def write_request(path, humans, edges=(), seed=3, **extra):
    req = {
        "object": "bench.obj",
        "humans": humans,
        "hoi_prompts": ["a person sits on the bench"] * humans,
        "edges": [{"from": a, "to": b, "prompt": "two people sit side by side"} for a, b in edges],
        "seed": seed,
        **extra,
    }
    path.write_text(json.dumps(req))
    return path


def sample(trained, request, out, *more):
    return run("sample", "--request", request, "--hoi", trained / "hoi.ckpt", "--hhi", trained / "hhi.ckpt",
               "--codec", trained / "codec.ckpt", "--steps", 8, "--out", out, *more)  # fmt: skip


# -- gen-toy and validate ----------------------------------------------------


def test_gen_toy_writes_one_line_per_frame(tmp_path):
    out = tmp_path / "b.jsonl"
    assert run("gen-toy", "--frames", 500, "--seed", 2, "--out", out, "--mesh-out", tmp_path / "b.obj") == 0
    assert len(out.read_text().splitlines()) == 500
    assert json.loads((tmp_path / "b.jsonl.config.json").read_text())["config"]["frames"] == 500
    assert (tmp_path / "b.obj").exists()
    again = tmp_path / "c.jsonl"
    run("gen-toy", "--frames", 500, "--seed", 2, "--out", again)
    assert again.read_bytes() == out.read_bytes()


def test_validate_reports_line_numbers(tmp_path, capsys):
    recs = dataio.gen_toy_dataset("carry", 3, seed=0)
    bad = recs[1].to_json()
    bad["humans"][0]["rotation"] = [[1, 0, 0], [0, 1, 0], [0, 0, 1.5]]
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in (recs[0].to_json(), bad, recs[2].to_json())) + "\n")
    assert run("validate", path) == 1
    out = capsys.readouterr().out
    assert f"{path}:2: INVALID" in out and "2 valid, 1 invalid" in out
    dataio.save_records(path, recs)
    assert run("validate", path) == 0


def test_missing_inputs_exit_1(tmp_path, capsys):
    assert run("train-score", "--data", tmp_path / "nope.jsonl", "--codec", "x", "--out", tmp_path / "s") == 1
    assert "does not exist" in capsys.readouterr().err
    assert run("train-score", "--out", tmp_path / "s") == 1
    assert "--data" in capsys.readouterr().err


# -- configuration -----------------------------------------------------------


def test_config_precedence(tmp_path, monkeypatch):
    toml = tmp_path / "c.toml"
    toml.write_text("[train-score]\nepochs = 7\ntrunk = 32\n")
    cfg = cli.resolve_config("train-score", {"trunk": 64}, "toy", toml)
    assert (cfg["epochs"], cfg["trunk"], cfg["head_hidden"], cfg["batch_size"]) == (7, 64, 64, "auto")
    monkeypatch.setenv("HHOI_SEED", "41")
    assert cli.resolve_config("gen-toy", {})["seed"] == 41
    assert cli.resolve_config("gen-toy", {"seed": 2})["seed"] == 2


def test_unknown_config_keys_are_rejected(tmp_path, capsys):
    toml = tmp_path / "c.toml"
    toml.write_text("frames = 3\nframez = 4\n")
    assert run("gen-toy", "--config", toml, "--out", tmp_path / "x.jsonl") == 1
    assert "framez" in capsys.readouterr().err


# -- training ----------------------------------------------------------------


def test_training_is_reproducible(trained, tmp_path):
    codec_args = ("train-codec", "--toy-poses", 1000, "--epochs", 2, "--seed", 0, "--out", tmp_path / "codec.ckpt")
    score_args = ("train-score", "--mode", "HOI", "--data", trained / "bench.jsonl", "--codec", trained / "codec.ckpt",
                  "--epochs", 3, "--batch-size", 20, "--trunk", 16, "--head-hidden", 8, "--seed", 0,
                  "--out", tmp_path / "hoi.ckpt")  # fmt: skip
    for args, name in ((codec_args, "codec.ckpt"), (score_args, "hoi.ckpt")):
        run(*args)
        first = (tmp_path / name).read_bytes()
        run(*args)
        assert (tmp_path / name).read_bytes() == first
    curve = (trained / "hoi.ckpt.curve.csv").read_text().splitlines()
    assert curve[0].startswith("# ") and curve[1] == "epoch,loss" and len(curve) == 5


# -- sampling ----------------------------------------------------------------


def test_cyclic_request_exits_2(trained, tmp_path, capsys):
    req = write_request(tmp_path / "r.json", 3, [(1, 0), (2, 1), (0, 2)])
    assert sample(trained, req, tmp_path / "s.json") == 2
    assert "cyclic" in capsys.readouterr().err
    assert not (tmp_path / "s.json").exists()


def test_sample_roundtrip_and_determinism(trained, tmp_path):
    req = write_request(tmp_path / "r.json", 3, [(1, 0), (2, 1)])
    assert sample(trained, req, tmp_path / "a.json") == 0
    text = (tmp_path / "a.json").read_text()
    assert sample(trained, req, tmp_path / "a.json") == 0
    assert (tmp_path / "a.json").read_text() == text
    (scene,) = cli.load_scene_file(tmp_path / "a.json")
    assert json.loads(json.dumps(scene.to_json())) == json.loads(text)
    assert len(scene.humans) == 3 and scene.config["config"]["guidance"]["steps"] == 8
    assert scene.diagnostics["seed"] == 3


def test_single_human_sample_is_a_plain_hoi_sample(trained, tmp_path):
    req = write_request(tmp_path / "r.json", 1, seed=5)
    assert sample(trained, req, tmp_path / "s.json") == 0
    (scene,) = cli.load_scene_file(tmp_path / "s.json")
    net = df.ScoreNet.load(trained / "hoi.ckpt")
    x1 = net.sched.sigma_max * sp.keyed_rng(5, "H0").standard_normal(20)
    cond = dataio.hash_embedding("a person sits on the bench", net.cond_dim)
    ref = sp.pf_ode_sample(net, net.sched, steps=8, cond=cond, x1=x1)
    h = scene.humans[0]
    np.testing.assert_array_equal(h.translation, ref[6:9])
    assert h.scale == max(ref[9], sp.MIN_SCALE)
    from hhoi.pose_codec import decode

    np.testing.assert_allclose(h.pose, decode(ref[10:], CodecParams.load(trained / "codec.ckpt")), atol=1e-12)


def test_batch_sampling_is_ordered_by_seed(trained, tmp_path):
    req = write_request(tmp_path / "r.json", 2, [(1, 0)])
    assert sample(trained, req, tmp_path / "batch.json", "--batch", 2, "--seed", 10) == 0
    scenes = cli.load_scene_file(tmp_path / "batch.json")
    assert [s.diagnostics["seed"] for s in scenes] == [10, 11]
    assert sample(trained, req, tmp_path / "one.json", "--seed", 11) == 0
    (single,) = cli.load_scene_file(tmp_path / "one.json")
    np.testing.assert_allclose(single.humans[0].translation, scenes[1].humans[0].translation, atol=1e-9)


def test_numerical_failure_exits_3(trained, tmp_path, monkeypatch, capsys):
    def blow_up(*a, **k):
        raise sp.SamplerError("non-finite state in sample 0 of scene 0 at t=0.5")

    monkeypatch.setattr(sp, "guided_sample_batch", blow_up)
    req = write_request(tmp_path / "r.json", 2, [(1, 0)])
    assert sample(trained, req, tmp_path / "s.json") == 3
    assert "sample 0" in capsys.readouterr().err


def test_bad_requests_exit_1(trained, tmp_path):
    assert sample(trained, write_request(tmp_path / "a.json", 2, colour="red"), tmp_path / "s.json") == 1
    (tmp_path / "b.json").write_text("{")
    assert sample(trained, tmp_path / "b.json", tmp_path / "s.json") == 1
    req = write_request(tmp_path / "c.json", 2, config={"lambda9": 1})
    assert sample(trained, req, tmp_path / "s.json") == 1


# -- evaluate ----------------------------------------------------------------


def scenes_from_records(records):
    """Reference frames written as scenes (object frame, humans as recorded)."""
    out = []
    for r in records:
        humans = []
        for h in r.humans:
            xf = dataio.human_in_object_frame(r, h)
            joints = sk.forward_kinematics(h.pose)
            A, B = sk.proxy_segments(joints)
            caps = np.concatenate([xf.apply(A), xf.apply(B), xf.scale * sk.DEFAULT_RADII[:, None]], axis=1)
            humans.append(sp.SceneHuman(f"H{h.id}", xf.rotation, xf.translation, xf.scale, h.pose,
                                        xf.apply(joints), caps))  # fmt: skip
        out.append(sp.Scene(humans, []).to_json())
    return {"scenes": out}


def test_evaluate_reference_against_itself(trained, tmp_path):
    records = dataio.load_records(trained / "bench.jsonl")
    (tmp_path / "ref_scenes.json").write_text(json.dumps(scenes_from_records(records)))
    out = tmp_path / "report.json"
    rc = run("evaluate", "--scenes", tmp_path / "ref_scenes.json", "--reference", trained / "bench.jsonl",
             "--codec", trained / "codec.ckpt", "--out", out)  # fmt: skip
    assert rc == 0
    report = json.loads(out.read_text())
    m = report["metrics"]
    assert abs(m["body_pose_fd"]) < 1e-6 and abs(m["distance_fd"]) < 1e-6
    assert m["success_rate"] == 1.0
    assert "penetration_human_human_x1000" in m and "penetration_human_object_x1000" in m
    assert report["config"]["config"]["reference"] == str(trained / "bench.jsonl")
    assert (tmp_path / "report.json.txt").read_text().startswith("metric")


def test_evaluate_empty_inputs_exit_1(trained, tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    rc = run("evaluate", "--scenes", tmp_path, "--reference", tmp_path / "empty.jsonl", "--codec", trained / "codec.ckpt")
    assert rc == 1


# -- fit-radii ---------------------------------------------------------------


def test_fit_radii_self_check(tmp_path):
    out = tmp_path / "radii.json"
    assert run("fit-radii", "--self-check", "--preset", "toy", "--seed", 0, "--out", out) == 0
    body = json.loads(out.read_text())
    assert len(body["radii"]) == 24
    assert body["max_relative_error"] < 0.05


def test_fit_radii_from_files(tmp_path):
    poses = dataio.gen_toy_poses(1, seed=0)
    np.save(tmp_path / "p.npy", poses)
    cloud = sk.proxy_surface_points(sk.forward_kinematics(poses[0]), sk.DEFAULT_RADII, 3000, np.random.default_rng(0))
    sk.save_cloud(tmp_path / "c.xyz", cloud)
    rc = run("fit-radii", "--poses", tmp_path / "p.npy", "--clouds", tmp_path / "c.xyz", "--steps", 5,
             "--points", 500, "--out", tmp_path / "r.json")  # fmt: skip
    assert rc == 0
    assert run("fit-radii", "--poses", tmp_path / "p.npy", "--clouds", f"{tmp_path / 'c.xyz'},{tmp_path / 'c.xyz'}") == 1
