"""Dataset records, frame normalisation, splitting, toy generators and prompts.

Toy pose family
---------------
Every synthetic pose is one of three base postures (``stand``, ``sit``,
``reach``) composed per joint with a jitter rotation. The jitter lives in a
6-D latent space: ``jitter_j = sum_k z_k * A[k, j]`` (axis-angle, z in
[-1, 1]^6) where the fixed basis ``A`` is scaled so no joint ever moves more
than 25 degrees from its base rotation.

Toy scenes
----------
``bench``: a 0.45 x 0.4 x 1.8 m box (depth x height x length, long axis z)
with two humans seated at z = +/-(0.45 + N(0, noise)) m, pelvis 0.12 m above
the seat, facing +x. The mean interpersonal translation difference is
(0, 0, -0.9) m, i.e. 0.90 m apart.
``board``: a 1.2 x 0.05 x 0.6 m board carried at hand height by two standing
humans on opposite short sides (x = +/-(0.75 + noise)), facing each other.
``carry``: a 0.4 m cube held by two humans standing side by side at
z = +/-(0.35 + noise), facing +x, both reaching.
Object world pose is fixed per scenario, so ``noise=0`` yields identical
frames.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry as geo
from .skeleton import N_POSE_JOINTS, POSE_DIM

# -- prompt embeddings -------------------------------------------------------

EMBED_DIM = 64


def hash_embedding(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Deterministic unit-norm pseudo-embedding seeded from the text."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass
class PromptTable:
    paraphrases: dict[str, list[str]]
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key, texts in self.paraphrases.items():
            if not texts:
                raise ValueError(f"prompt key {key!r} has no paraphrases")
        dims = {len(v) for v in self.embeddings.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding table mixes dimensions {sorted(dims)}")
        self.embeddings = {k: np.asarray(v, dtype=np.float64) for k, v in self.embeddings.items()}

    def embed(self, text: str, dim: int = EMBED_DIM) -> np.ndarray:
        if text in self.embeddings:
            return self.embeddings[text]
        return hash_embedding(text, dim)

    @classmethod
    def load(cls, path, embeddings_path=None) -> "PromptTable":
        table = json.loads(Path(path).read_text())
        emb = json.loads(Path(embeddings_path).read_text()) if embeddings_path else {}
        return cls({k: list(v) for k, v in table.items()}, emb)


def sample_prompt(table: PromptTable, key: str, rng: np.random.Generator, dim: int = EMBED_DIM):
    if key not in table.paraphrases:
        raise ValueError(f"unknown prompt key {key!r}")
    texts = table.paraphrases[key]
    text = texts[int(rng.integers(len(texts)))]
    return text, table.embed(text, dim)


# -- toy pose family ---------------------------------------------------------

POSTURES = ("stand", "sit", "reach")
N_LATENT = 6
MAX_JITTER_DEG = 25.0

# base joint rotations as (pose index = joint id - 1, axis, degrees)
_ARMS_DOWN = [(15, "z", -80.0), (16, "z", 80.0)]
_BASE = {
    "stand": _ARMS_DOWN,
    "sit": [(0, "x", -90.0), (1, "x", -90.0), (3, "x", 90.0), (4, "x", 90.0),
            (15, "z", -80.0), (16, "z", 80.0), (17, "y", -60.0), (18, "y", 60.0)],
    "reach": [(15, "z", -80.0), (16, "y", 90.0)],
}  # fmt: skip


def _jitter_basis() -> np.ndarray:
    A = np.random.default_rng(20240611).standard_normal((N_LATENT, N_POSE_JOINTS, 3))
    per_joint = np.linalg.norm(A, axis=2).sum(axis=0)  # worst case over z in [-1,1]^K
    return A * (math.radians(MAX_JITTER_DEG) * 0.999 / per_joint)[None, :, None]


JITTER_BASIS = _jitter_basis()


def base_rotations(posture: str) -> np.ndarray:
    R = np.tile(np.eye(3), (N_POSE_JOINTS, 1, 1))
    for j, axis, deg in _BASE[posture]:
        R[j] = geo.axis_rotation(axis, deg)
    return R


def posture_pose(posture: str, z=None) -> np.ndarray:
    """126-D pose of ``posture`` with latent jitter ``z`` (defaults to none)."""
    R = base_rotations(posture)
    if z is not None:
        jitter = np.einsum("k,kjc->jc", np.asarray(z, dtype=np.float64), JITTER_BASIS)
        R = R @ Rotation.from_rotvec(jitter).as_matrix()
    return geo.matrix_to_rot6d(R).reshape(POSE_DIM)


def gen_toy_poses(n: int, seed: int = 0, return_labels: bool = False):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(len(POSTURES), size=n)
    z = rng.uniform(-1.0, 1.0, size=(n, N_LATENT))
    poses = np.stack([posture_pose(POSTURES[l], zz) for l, zz in zip(labels, z)])
    return (poses, labels) if return_labels else poses


# -- records -----------------------------------------------------------------


class RecordError(ValueError):
    pass


@dataclass
class HumanRecord:
    id: int
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    pose: np.ndarray

    @property
    def transform(self) -> geo.SimilarityTransform:
        return geo.SimilarityTransform(_orthonormalize(self.rotation), self.translation, self.scale)


@dataclass
class HhoiRecord:
    frame_id: str
    category: str
    object_rotation: np.ndarray
    object_translation: np.ndarray
    mesh: str
    humans: list[HumanRecord]
    prompts: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.humans:
            raise RecordError("record has no humans")
        _check_rot(self.object_rotation, "object rotation")
        _check_finite(self.object_translation, 3, "object translation")
        for h in self.humans:
            _check_rot(h.rotation, f"human {h.id} rotation")
            _check_finite(h.translation, 3, f"human {h.id} translation")
            _check_finite(h.pose, POSE_DIM, f"human {h.id} pose")
            if not (math.isfinite(h.scale) and h.scale > 0):
                raise RecordError(f"human {h.id} scale must be positive, got {h.scale}")

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "category": self.category,
            "object": {
                "rotation": np.asarray(self.object_rotation).tolist(),
                "translation": np.asarray(self.object_translation).tolist(),
                "mesh": self.mesh,
            },
            "humans": [
                {
                    "id": h.id,
                    "rotation": np.asarray(h.rotation).tolist(),
                    "translation": np.asarray(h.translation).tolist(),
                    "scale": float(h.scale),
                    "pose": np.asarray(h.pose).tolist(),
                }
                for h in self.humans
            ],
            "prompts": dict(self.prompts),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HhoiRecord":
        try:
            o = obj["object"]
            rec = cls(
                frame_id=str(obj["frame_id"]),
                category=str(obj["category"]),
                object_rotation=np.asarray(o["rotation"], dtype=np.float64),
                object_translation=np.asarray(o["translation"], dtype=np.float64),
                mesh=str(o.get("mesh", "")),
                humans=[
                    HumanRecord(
                        int(h["id"]),
                        np.asarray(h["rotation"], dtype=np.float64),
                        np.asarray(h["translation"], dtype=np.float64),
                        float(h["scale"]),
                        np.asarray(h["pose"], dtype=np.float64),
                    )
                    for h in obj["humans"]
                ],
                prompts={str(k): str(v) for k, v in obj.get("prompts", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"malformed record: {exc!r}") from None
        rec.validate()
        return rec


def _check_rot(R, what: str) -> None:
    R = np.asarray(R)
    if R.shape != (3, 3):
        raise RecordError(f"{what} must be 3x3, got shape {R.shape}")
    try:
        geo.check_rotation(R, tol=1e-6)
    except geo.GeometryError as exc:
        raise RecordError(f"{what}: {exc}") from None


def _check_finite(x, n: int, what: str) -> None:
    x = np.asarray(x)
    if x.shape != (n,):
        raise RecordError(f"{what} must have {n} entries, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise RecordError(f"{what} has non-finite entries")


def _orthonormalize(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    return U @ Vt


def save_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def iter_record_lines(path):
    """Yield ``(line number, record or RecordError)`` for every non-blank line."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, HhoiRecord.from_json(json.loads(line))
            except json.JSONDecodeError as exc:
                yield lineno, RecordError(f"invalid JSON: {exc.msg}")
            except RecordError as exc:
                yield lineno, exc


def load_records(path) -> list[HhoiRecord]:
    """Load a JSONL dataset; the first malformed line raises with its line number."""
    out = []
    for lineno, rec in iter_record_lines(path):
        if isinstance(rec, RecordError):
            raise RecordError(f"{path}:{lineno}: {rec}")
        out.append(rec)
    return out


# -- sample extraction -------------------------------------------------------

HOI_DIM = 20
HHI_DIM = 29


def hoi_vector(R, t, s, emb) -> np.ndarray:
    return np.concatenate([geo.matrix_to_rot6d(R), t, [s], emb])


def hhi_vector(emb_ref, R_rel, t_rel, emb_other) -> np.ndarray:
    return np.concatenate([emb_ref, geo.matrix_to_rot6d(R_rel), t_rel, emb_other])


def human_in_object_frame(record: HhoiRecord, human: HumanRecord) -> geo.SimilarityTransform:
    R_o = np.asarray(record.object_rotation)
    R = _orthonormalize(R_o.T @ human.rotation)
    t = R_o.T @ (human.translation - record.object_translation)
    return geo.SimilarityTransform(R, t, human.scale)


def relative_transform(ref: geo.SimilarityTransform, other: geo.SimilarityTransform):
    """``(R, t)`` of ``other`` in ``ref``'s frame, translation in ``ref``'s scale units."""
    R = _orthonormalize(ref.rotation.T @ other.rotation)
    t = ref.rotation.T @ (other.translation - ref.translation) / ref.scale
    return R, t


def _embed(codec, poses: np.ndarray) -> np.ndarray:
    from .pose_codec import encode

    return encode(poses, codec)


def extract_hoi(record: HhoiRecord, codec) -> list[tuple[np.ndarray, str]]:
    """One 20-vector per human in the object's canonical frame, with its prompt."""
    _check_rot(record.object_rotation, "object rotation")
    embs = _embed(codec, np.stack([h.pose for h in record.humans]))
    prompt = record.prompts.get("hoi", record.category)
    out = []
    for h, emb in zip(record.humans, embs):
        xf = human_in_object_frame(record, h)
        out.append((hoi_vector(xf.rotation, xf.translation, xf.scale, emb), prompt))
    return out


def extract_hhi(record: HhoiRecord, codec) -> list[tuple[np.ndarray, str]]:
    """One 29-vector per ordered human pair (two per dyad)."""
    if len(record.humans) < 2:
        warnings.warn(f"frame {record.frame_id}: fewer than 2 humans, no HHI samples")
        return []
    embs = _embed(codec, np.stack([h.pose for h in record.humans]))
    xfs = [h.transform for h in record.humans]
    prompt = record.prompts.get("hhi", record.category)
    out = []
    for a in range(len(xfs)):
        for b in range(len(xfs)):
            if a != b:
                R, t = relative_transform(xfs[a], xfs[b])
                out.append((hhi_vector(embs[a], R, t, embs[b]), prompt))
    return out


def split_dataset(samples, ratio: float = 0.9, seed: int = 0):
    n = len(samples)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    # half-up rounding of the test share, robust to 1 - 0.9 != 0.1
    n_test = int(math.floor(n * round(1.0 - ratio, 12) + 0.5))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    pick = (lambda idx: samples[idx]) if isinstance(samples, np.ndarray) else (
        lambda idx: [samples[i] for i in idx]
    )
    return pick(train_idx), pick(test_idx)


# -- toy scenes --------------------------------------------------------------

SCENARIOS = ("bench", "board", "carry")


@dataclass(frozen=True)
class ScenarioSpec:
    extents: tuple[float, float, float]
    posture: str
    offset: float
    prompt_hoi: str
    prompt_hhi: str
    world_yaw: float
    world_translation: tuple[float, float, float]


SCENARIO_SPECS = {
    "bench": ScenarioSpec((0.45, 0.4, 1.8), "sit", 0.45, "a person sits on the bench",
                          "two people sit side by side", 30.0, (1.0, 0.2, -0.5)),
    "board": ScenarioSpec((1.2, 0.05, 0.6), "stand", 0.75, "a person holds the board",
                          "two people face each other", -20.0, (0.0, 0.9, 2.0)),
    "carry": ScenarioSpec((0.4, 0.4, 0.4), "reach", 0.35, "a person carries the box",
                          "two people stand side by side", 75.0, (-1.5, 1.0, 0.0)),
}  # fmt: skip

BENCH_PELVIS_HEIGHT = 0.36


def scenario_mesh(scenario: str) -> geo.TriangleMesh:
    return geo.box_mesh(SCENARIO_SPECS[scenario].extents)


def scenario_layout(scenario: str, offset: float | None = None):
    """Noise-free object-frame human placements ``[(R, t), (R, t)]``."""
    spec = SCENARIO_SPECS[scenario]
    d = spec.offset if offset is None else offset
    face_x = geo.axis_rotation("y", 90.0)
    if scenario == "bench":
        return [(face_x, np.array([0.0, BENCH_PELVIS_HEIGHT, d])),
                (face_x, np.array([0.0, BENCH_PELVIS_HEIGHT, -d]))]  # fmt: skip
    if scenario == "board":
        return [(geo.axis_rotation("y", -90.0), np.array([d, 0.05, 0.0])),
                (face_x, np.array([-d, 0.05, 0.0]))]  # fmt: skip
    return [(face_x, np.array([-0.25, -0.1, d])), (face_x, np.array([-0.25, -0.1, -d]))]


def expected_separation(scenario: str, offset: float | None = None) -> np.ndarray:
    """Mean of ``t_0 - t_1`` (object frame) for a toy scenario."""
    (_, t0), (_, t1) = scenario_layout(scenario, offset)
    return t0 - t1


def gen_toy_dataset(
    scenario: str, n_frames: int, noise: float = 0.05, seed: int = 0, offset: float | None = None
) -> list[HhoiRecord]:
    """Procedural two-human frames; ``noise`` is the positional std in metres.

    Lateral offsets, in-plane position, yaw (``noise * 40`` degrees std) and
    scale (``noise / 5`` std) are jittered; the pose latent is drawn from
    U(-1, 1)^6 scaled by ``min(1, noise / 0.05)``.
    """
    if scenario not in SCENARIO_SPECS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    spec = SCENARIO_SPECS[scenario]
    rng = np.random.default_rng(seed)
    R_o = geo.axis_rotation("y", spec.world_yaw)
    t_o = np.asarray(spec.world_translation, dtype=np.float64)
    layout = scenario_layout(scenario, offset)
    pose_amp = min(1.0, noise / 0.05)
    records = []
    for f in range(n_frames):
        humans = []
        for k, (R, t) in enumerate(layout):
            lateral = rng.normal(0.0, noise)
            jitter = rng.normal(0.0, noise, size=3)
            yaw = rng.normal(0.0, noise * 40.0)
            scale = 1.0 + rng.normal(0.0, noise / 5.0)
            z = rng.uniform(-1.0, 1.0, N_LATENT) * pose_amp
            t_obj = t + jitter * np.array([1.0, 0.2, 0.0])
            if scenario == "board":
                t_obj[0] += np.sign(t[0]) * lateral
            else:
                t_obj[2] += np.sign(t[2]) * lateral
            R_obj = geo.axis_rotation("y", yaw) @ R
            humans.append(
                HumanRecord(k, R_o @ R_obj, R_o @ t_obj + t_o, scale, posture_pose(spec.posture, z))
            )
        records.append(
            HhoiRecord(
                frame_id=f"{scenario}-{f:06d}",
                category=scenario,
                object_rotation=R_o,
                object_translation=t_o,
                mesh=f"{scenario}.obj",
                humans=humans,
                prompts={"hoi": spec.prompt_hoi, "hhi": spec.prompt_hhi},
            )
        )
    return records


def training_arrays(records, codec, mode: str, embed=hash_embedding, dim: int = EMBED_DIM):
    """Stack ``(samples, conditions)`` of one mode ("HOI" or "HHI") over a dataset."""
    if mode not in ("HOI", "HHI"):
        raise ValueError(f"mode must be HOI or HHI, got {mode!r}")
    extract = extract_hoi if mode == "HOI" else extract_hhi
    rows, prompts = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for rec in records:
            for vec, prompt in extract(rec, codec):
                rows.append(vec)
                prompts.append(prompt)
    if not rows:
        raise ValueError(f"dataset yields no {mode} samples")
    cache = {p: embed(p, dim) for p in sorted(set(prompts))}
    return np.stack(rows), np.stack([cache[p] for p in prompts])
