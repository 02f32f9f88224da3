"""Body-pose autoencoder: 126-D joint rotations <-> 10-D latent embedding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .numerics import autograd as ad
from .numerics import checkpoint
from .numerics.nn import build_layers, init_tensors, mlp_forward, mlp_spec
from .numerics.train import minimize
from .skeleton import N_POSE_JOINTS, POSE_DIM

EMBED_DIM = 10
ENCODER_DIMS = (POSE_DIM, 256, 256, 64, EMBED_DIM)
DECODER_DIMS = (EMBED_DIM, 64, 256, 256, POSE_DIM)
LATENT_WEIGHT = 1e-4

ENCODER_SPEC = mlp_spec("enc", ENCODER_DIMS)
DECODER_SPEC = mlp_spec("dec", DECODER_DIMS)


@dataclass
class CodecParams:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0) -> "CodecParams":
        rng = np.random.default_rng(seed)
        tensors = init_tensors(ENCODER_SPEC, rng)
        tensors.update(init_tensors(DECODER_SPEC, rng))
        return cls(tensors)

    @classmethod
    def zeros(cls) -> "CodecParams":
        return cls({k: np.zeros_like(v) for k, v in cls.init().tensors.items()})

    def save(self, path) -> None:
        checkpoint.save(path, self.tensors, {"kind": "pose_codec", **self.meta})

    @classmethod
    def load(cls, path) -> "CodecParams":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "pose_codec":
            raise checkpoint.CheckpointError(f"{path} is not a pose codec checkpoint")
        return cls(tensors, meta)


def encode_with(tensors, pose):
    return mlp_forward(build_layers(tensors, ENCODER_SPEC), pose)


def decode_with(tensors, emb):
    return mlp_forward(build_layers(tensors, DECODER_SPEC), emb)


def encode(pose, params: CodecParams) -> np.ndarray:
    return encode_with(params.tensors, np.asarray(pose, dtype=np.float64))


def decode(emb, params: CodecParams) -> np.ndarray:
    """Raw 126-vector(s); degenerate 6D blocks are left to the caller to regularise."""
    return decode_with(params.tensors, np.asarray(emb, dtype=np.float64))


def decode_rotations(emb, params: CodecParams) -> np.ndarray:
    """Decoded poses as (..., 21, 3, 3) rotation matrices."""
    raw = decode(emb, params)
    blocks = raw.reshape(raw.shape[:-1] + (N_POSE_JOINTS, 6))
    return geo.gram_schmidt(geo.regularize_rot6d(blocks))


def joint_angle_error(poses, params: CodecParams) -> np.ndarray:
    """Per-joint geodesic error (radians) of decode(encode(pose)), shape (n, 21)."""
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    target = geo.gram_schmidt(poses.reshape(-1, N_POSE_JOINTS, 6))
    recon = decode_rotations(encode(poses, params), params)
    return geo.geodesic_angle(target, recon)


@dataclass
class CodecConfig:
    epochs: int = 300
    batch_size: int = 500
    seed: int = 0
    holdout: float = 0.1


def train_codec(poses, config: CodecConfig | None = None, report=None) -> tuple[CodecParams, list[dict]]:
    """Fit encoder/decoder by reconstruction MSE plus a small latent penalty.

    Returns the params and a per-epoch list of ``{epoch, train, heldout}``
    losses; ``report`` (if given) is called with each entry.
    """
    config = config or CodecConfig()
    data = np.asarray(poses, dtype=np.float64).reshape(-1, POSE_DIM)
    if len(data) < 1000:
        raise ValueError(f"codec training needs at least 1000 poses, got {len(data)}")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    n_hold = int(round(config.holdout * len(data)))
    held, train = data[order[:n_hold]], data[order[n_hold:]]
    init = CodecParams.init(config.seed)

    def loss_fn(tensors, x):
        emb = encode_with(tensors, x)
        recon = decode_with(tensors, emb)
        mse = ad.mean(ad.square(recon - x))
        reg = ad.mean(ad.sum_(ad.square(emb), axis=-1))
        return mse + LATENT_WEIGHT * reg

    curve: list[dict] = []

    def on_epoch(epoch, train_loss, tensors):
        entry = {"epoch": epoch, "train": train_loss}
        if len(held):
            entry["heldout"] = float(loss_fn(tensors, held))
        curve.append(entry)
        if report is not None:
            report(entry)

    tensors, _ = minimize(
        init.tensors,
        lambda t, idx: loss_fn(t, train[idx]),
        len(train),
        config.epochs,
        config.batch_size,
        rng,
        on_epoch=on_epoch,
    )
    params = CodecParams(tensors, {"epochs": config.epochs, "seed": config.seed})
    return params, curve
