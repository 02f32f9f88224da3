"""Command-line entry point: ``hhoi <command> [options]``.

Options resolve in the order defaults < ``--preset`` < ``--config`` TOML
file < command-line flags. ``seed`` falls back to ``$HHOI_SEED`` when no
other source sets it. Exit codes: 0 success, 1 bad input, 2 invalid
interaction graph, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import dataio
from . import diffusion as df
from . import geometry as geo
from . import metrics as mt
from . import sampler as sp
from . import skeleton as sk
from .numerics.checkpoint import CheckpointError
from .numerics.optim import TrainingError
from .pose_codec import CodecConfig, CodecParams, joint_angle_error, train_codec

EXIT_OK, EXIT_INPUT, EXIT_GRAPH, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "train-codec": {
        "poses": None, "toy_poses": 20000, "epochs": 300, "batch_size": 500, "holdout": 0.1,
        "seed": None, "out": None, "curve": None,
    },
    "train-score": {
        "mode": "HOI", "data": None, "codec": None, "epochs": 20000, "batch_size": 500, "trunk": 256,
        "head_hidden": 128, "ema": 0.999, "seed": None, "out": None, "curve": None,
    },
    "sample": {
        "request": None, "hoi": None, "hhi": None, "codec": None, "out": None, "steps": 500,
        "batch": 1, "workers": 1, "seed": None,
    },
    "evaluate": {
        "scenes": None, "reference": None, "codec": None, "scenario": "bench", "mesh": None,
        "out": None, "seed": None,
    },
    "gen-toy": {
        "scenario": "bench", "frames": 500, "noise": 0.05, "offset": None, "seed": None, "out": None,
        "mesh_out": None, "poses": 0, "poses_out": None,
    },
    "validate": {"data": None},
    "fit-radii": {
        "poses": None, "clouds": None, "self_check": False, "steps": 500, "points": 5000,
        "seed": None, "out": None,
    },
}  # fmt: skip

PRESETS = {
    "toy": {
        "train-codec": {"epochs": 50},
        "train-score": {"epochs": 300, "batch_size": "auto", "trunk": 128, "head_hidden": 64},
        "sample": {"steps": 200},
        "fit-radii": {"steps": 200, "points": 5000},
    }
}


def resolve_config(command: str, cli: dict, preset: str | None = None, config_path=None) -> dict:
    """Merge defaults, preset, TOML file and explicit flags; reject unknown keys."""
    cfg = dict(DEFAULTS[command])
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset].get(command, {}))
    if config_path is not None:
        try:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {config_path}: {exc}") from None
        data = data.get(command, data) if isinstance(data.get(command), dict) else data
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        cfg.update(data)
    cfg.update({k: v for k, v in cli.items() if v is not None and k in cfg})
    if "seed" in cfg and cfg["seed"] is None:
        env = os.environ.get("HHOI_SEED")
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"HHOI_SEED must be an integer, got {env!r}") from None
    return cfg


def _provenance(command: str, cfg: dict) -> dict:
    return {"command": command, "version": __version__, "config": cfg}


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _write_curve(path, rows: list[dict], prov: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(prov, sort_keys=True) + "\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------


def cmd_train_codec(cfg: dict) -> int:
    _require(cfg, "out")
    if cfg["poses"]:
        poses = np.load(_existing(cfg["poses"], "pose file"))
    else:
        poses = dataio.gen_toy_poses(int(cfg["toy_poses"]), seed=cfg["seed"])
    config = CodecConfig(int(cfg["epochs"]), int(cfg["batch_size"]), int(cfg["seed"]), float(cfg["holdout"]))
    params, curve = train_codec(poses, config)
    prov = _provenance("train-codec", cfg)
    params.meta.update(prov)
    params.save(cfg["out"])
    _write_curve(cfg["curve"] or str(cfg["out"]) + ".curve.csv", curve, prov)
    err = np.degrees(joint_angle_error(poses[: min(len(poses), 2000)], params)).mean()
    print(f"codec saved to {cfg['out']}; mean joint error on the first poses {err:.3f} deg")
    return EXIT_OK


def cmd_train_score(cfg: dict) -> int:
    _require(cfg, "data", "codec", "out")
    mode = str(cfg["mode"]).upper()
    if mode not in df.LAYOUTS:
        raise ConfigError(f"--mode must be HOI or HHI, got {cfg['mode']!r}")
    records = dataio.load_records(_existing(cfg["data"], "dataset"))
    codec = CodecParams.load(_existing(cfg["codec"], "codec checkpoint"))
    X, C = dataio.training_arrays(records, codec, mode)
    batch = df.auto_batch_size(len(X)) if cfg["batch_size"] == "auto" else int(cfg["batch_size"])
    config = df.ScoreTrainConfig(
        int(cfg["epochs"]), batch, int(cfg["seed"]), int(cfg["trunk"]),
        int(cfg["head_hidden"]), None if cfg["ema"] in (None, 0) else float(cfg["ema"]),
    )  # fmt: skip
    net, history = df.train_score(X, C, mode, config=config)
    prov = _provenance("train-score", cfg)
    net.save(cfg["out"], {"provenance": prov})
    _write_curve(
        cfg["curve"] or str(cfg["out"]) + ".curve.csv",
        [{"epoch": k, "loss": v} for k, v in enumerate(history)],
        prov,
    )
    print(f"{mode} score network saved to {cfg['out']} ({len(X)} samples, final loss {history[-1]:.5g})")
    return EXIT_OK


def parse_request(obj: dict) -> tuple[sp.HhiGraph, dict]:
    """Scene request -> (graph, extras). Edge endpoints are 0-based human indices."""
    if not isinstance(obj, dict):
        raise ConfigError("scene request must be a JSON object")
    allowed = {"object", "humans", "hoi_prompts", "edges", "seed", "config", "keys"}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown scene-request key(s): {', '.join(unknown)}")
    try:
        n = int(obj["humans"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("scene request needs an integer 'humans' count") from None
    edges, prompts = [], []
    for e in obj.get("edges", []):
        try:
            edges.append((int(e["from"]), int(e["to"])))
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"malformed edge {e!r}; expected {{from, to, prompt}}") from None
        prompts.append(str(e.get("prompt", "")))
    hoi_prompts = obj.get("hoi_prompts")
    g = sp.HhiGraph(n, edges, list(hoi_prompts) if hoi_prompts is not None else None, prompts, obj.get("keys"))
    return g, {"object": obj.get("object"), "seed": obj.get("seed"), "config": obj.get("config", {})}


def _guidance_config(steps: int, overrides: dict) -> sp.GuidanceConfig:
    fields = set(sp.GuidanceConfig.__dataclass_fields__)
    unknown = sorted(set(overrides) - fields)
    if unknown:
        raise ConfigError(f"unknown guidance override(s): {', '.join(unknown)}")
    return sp.GuidanceConfig(**{"steps": steps, **overrides})


def _sample_chunk(args):
    g, hoi_path, hhi_path, codec_path, gcfg, seeds = args
    hoi = df.ScoreNet.load(hoi_path)
    hhi = df.ScoreNet.load(hhi_path) if hhi_path else None
    codec = CodecParams.load(codec_path)
    return sp.guided_sample_batch(g, hoi, hhi, codec, gcfg, seeds)


def cmd_sample(cfg: dict) -> int:
    _require(cfg, "request", "hoi", "codec", "out")
    try:
        req = json.loads(_existing(cfg["request"], "scene request").read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene request is not valid JSON: {exc.msg}") from None
    g, extra = parse_request(req)
    sp.validate_hhi_graph(g)
    if g.edges and not cfg["hhi"]:
        raise ConfigError("the request has HHI edges; pass --hhi")
    for key in ("hoi", "codec") + (("hhi",) if cfg["hhi"] else ()):
        _existing(cfg[key], f"{key} checkpoint")
    from_cli = cfg.pop("seed_from_cli", False)
    if extra["seed"] is not None and not from_cli:
        cfg["seed"] = int(extra["seed"])
    gcfg = _guidance_config(int(cfg["steps"]), dict(extra["config"]))
    seeds = [int(cfg["seed"]) + k for k in range(int(cfg["batch"]))]
    workers = max(1, min(int(cfg["workers"]), len(seeds)))
    chunks = [seeds[k::workers] for k in range(workers)]
    jobs = [(g, cfg["hoi"], cfg["hhi"], cfg["codec"], gcfg, c) for c in chunks]
    if workers == 1:
        results = [_sample_chunk(jobs[0])]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sample_chunk, jobs))
    by_seed = {d.seed: d for chunk in results for d in chunk}
    codec = CodecParams.load(cfg["codec"])
    prov = _provenance("sample", {**cfg, "guidance": gcfg.as_dict(), "request": req})
    scenes = [sp.reconstruct_scene(by_seed[s], g, codec, obj=extra["object"], config=prov) for s in seeds]
    for s, sc in zip(seeds, scenes):
        sc.diagnostics["seed"] = s
    payload = scenes[0].to_json() if len(scenes) == 1 else {"scenes": [sc.to_json() for sc in scenes], **prov}
    _write_json(cfg["out"], payload)
    for s, sc in zip(seeds, scenes):
        d = sc.diagnostics
        print(f"seed {s}: L_inc={d['inconsistency_loss']:.3g} L_col={d['collision_loss']:.3g}")
    return EXIT_OK


def load_scene_file(path) -> list[sp.Scene]:
    data = json.loads(Path(path).read_text())
    if "scenes" in data:
        return [sp.Scene.from_json(s) for s in data["scenes"]]
    return [sp.Scene.from_json(data)]


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "scenes", "reference", "codec")
    src = _existing(cfg["scenes"], "scenes path")
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    scenes = [sc for f in files for sc in load_scene_file(f)]
    records = dataio.load_records(_existing(cfg["reference"], "reference dataset"))
    if not scenes or not records:
        raise ConfigError("no scenes or no reference records to evaluate")
    codec = CodecParams.load(_existing(cfg["codec"], "codec checkpoint"))
    mesh = geo.load_obj(_existing(cfg["mesh"], "mesh")) if cfg["mesh"] else dataio.scenario_mesh(cfg["scenario"])
    ref_scenes = [
        np.stack([dataio.human_in_object_frame(r, h).translation for h in r.humans]) for r in records
    ]
    ok = [sc for sc in scenes if mt.scene_is_valid(sc, len(sc.humans))]
    report = {
        "body_pose_fd": mt.body_pose_fd(ok, [h.pose for r in records for h in r.humans], codec),
        "distance_fd": mt.distance_fd(ok, ref_scenes),
        "distance_fd_norm": mt.distance_fd(ok, ref_scenes, norm=True),
        "success_rate": mt.success_rate(scenes, max(len(sc.humans) for sc in scenes)),
    }
    pens = [mt.penetration_ratio(sc, mesh, seed=cfg["seed"]) for sc in ok]
    report["penetration_human_human_x1000"] = float(np.mean([p[0] for p in pens]))
    obj = [p[1] for p in pens if p[1] is not None]
    report["penetration_human_object_x1000"] = float(np.mean(obj)) if obj else None
    for kind in ("hand", "hip"):
        report[f"contact_distance_{kind}"] = float(
            np.mean([mt.contact_distance(sc, mesh, kind, seed=cfg["seed"]) for sc in ok])
        )
    text = mt.report_table(report)
    print(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(mt.report_json(report, _provenance("evaluate", cfg)) + "\n")
        Path(str(cfg["out"]) + ".txt").write_text(text + "\n")
    return EXIT_OK


def cmd_gen_toy(cfg: dict) -> int:
    _require(cfg, "out")
    offset = None if cfg["offset"] is None else float(cfg["offset"])
    records = dataio.gen_toy_dataset(cfg["scenario"], int(cfg["frames"]), float(cfg["noise"]), cfg["seed"], offset)
    dataio.save_records(cfg["out"], records)
    _write_json(str(cfg["out"]) + ".config.json", _provenance("gen-toy", cfg))
    if cfg["mesh_out"]:
        geo.write_obj(cfg["mesh_out"], dataio.scenario_mesh(cfg["scenario"]))
    if int(cfg["poses"]) > 0:
        _require(cfg, "poses_out")
        with open(cfg["poses_out"], "wb") as fh:
            np.save(fh, dataio.gen_toy_poses(int(cfg["poses"]), seed=cfg["seed"]))
    print(f"wrote {len(records)} {cfg['scenario']} frames to {cfg['out']}")
    return EXIT_OK


def cmd_validate(cfg: dict) -> int:
    _require(cfg, "data")
    path = _existing(cfg["data"], "dataset")
    n_ok = n_bad = 0
    for lineno, rec in dataio.iter_record_lines(path):
        if isinstance(rec, dataio.RecordError):
            n_bad += 1
            print(f"{path}:{lineno}: INVALID {rec}")
        else:
            n_ok += 1
            print(f"{path}:{lineno}: ok {rec.frame_id} ({len(rec.humans)} humans)")
    print(f"{n_ok} valid, {n_bad} invalid")
    return EXIT_OK if n_bad == 0 and n_ok > 0 else EXIT_INPUT


def cmd_fit_radii(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    if cfg["self_check"]:
        poses = [dataio.posture_pose(p, rng.uniform(-1, 1, dataio.N_LATENT)) for p in dataio.POSTURES]
        truth = np.asarray(sk.DEFAULT_RADII)
        clouds = [sk.proxy_surface_points(sk.forward_kinematics(p), truth, 20000, rng) for p in poses]
        init = np.full(sk.N_CAPSULES, 0.06)
    else:
        _require(cfg, "poses", "clouds")
        poses = list(np.load(_existing(cfg["poses"], "pose file")).reshape(-1, sk.POSE_DIM))
        paths = cfg["clouds"] if isinstance(cfg["clouds"], list) else str(cfg["clouds"]).split(",")
        clouds = [sk.load_cloud(_existing(p, "cloud")) for p in paths]
        if len(clouds) != len(poses):
            raise ConfigError(f"{len(poses)} poses but {len(clouds)} clouds")
        truth, init = None, sk.DEFAULT_RADII
    radii = sk.fit_radii(poses, clouds, steps=int(cfg["steps"]), n_points=int(cfg["points"]), init=init,
                         seed=int(cfg["seed"]))  # fmt: skip
    out = {"radii": radii.tolist(), **_provenance("fit-radii", cfg)}
    if truth is not None:
        rel = np.abs(radii - truth) / truth
        out["max_relative_error"] = float(rel.max())
        print(f"self-check: max relative radius error {rel.max():.4f}")
    if cfg["out"]:
        _write_json(cfg["out"], out)
    else:
        print(json.dumps(out["radii"]))
    return EXIT_OK


COMMANDS = {
    "train-codec": cmd_train_codec,
    "train-score": cmd_train_score,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "gen-toy": cmd_gen_toy,
    "validate": cmd_validate,
    "fit-radii": cmd_fit_radii,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hhoi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="TOML file with option values")
        p.add_argument("--preset", choices=sorted(PRESETS))
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("train-codec", help="train the body-pose autoencoder"))
    p.add_argument("--poses", help=".npy array of (n, 126) poses; default: toy poses")
    p.add_argument("--toy-poses", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--holdout", type=float)
    p.add_argument("--out")
    p.add_argument("--curve")

    p = common(sub.add_parser("train-score", help="train an HOI or HHI score network"))
    p.add_argument("--mode", choices=["HOI", "HHI"])
    p.add_argument("--data")
    p.add_argument("--codec")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--trunk", type=int)
    p.add_argument("--head-hidden", type=int)
    p.add_argument("--ema", type=float)
    p.add_argument("--out")
    p.add_argument("--curve")

    p = common(sub.add_parser("sample", help="compose a scene from a request"))
    p.add_argument("--request")
    p.add_argument("--hoi")
    p.add_argument("--hhi")
    p.add_argument("--codec")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--workers", type=int)

    p = common(sub.add_parser("evaluate", help="metric report for generated scenes"))
    p.add_argument("--scenes")
    p.add_argument("--reference")
    p.add_argument("--codec")
    p.add_argument("--scenario", choices=dataio.SCENARIOS)
    p.add_argument("--mesh")
    p.add_argument("--out")

    p = common(sub.add_parser("gen-toy", help="write a procedural toy dataset"))
    p.add_argument("--scenario", choices=dataio.SCENARIOS)
    p.add_argument("--frames", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--out")
    p.add_argument("--mesh-out")
    p.add_argument("--poses", type=int)
    p.add_argument("--poses-out")

    p = common(sub.add_parser("validate", help="check a JSONL dataset record by record"), seed=False)
    p.add_argument("data", nargs="?")

    p = common(sub.add_parser("fit-radii", help="fit capsule radii to surface clouds"))
    p.add_argument("--poses")
    p.add_argument("--clouds", help="comma-separated XYZ files, one per pose")
    p.add_argument("--self-check", action="store_true", default=None)
    p.add_argument("--steps", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "config", "preset")}
    try:
        cfg = resolve_config(args.command, cli, args.preset, args.config)
        if args.command == "sample" and args.seed is not None:
            cfg["seed_from_cli"] = True
        return COMMANDS[args.command](cfg)
    except sp.GraphError as exc:
        print(f"error: invalid interaction graph: {exc}", file=sys.stderr)
        return EXIT_GRAPH
    except (sp.SamplerError, TrainingError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, dataio.RecordError, CheckpointError, geo.GeometryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
