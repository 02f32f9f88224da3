"""Variance-exploding noise schedule, score networks and denoising score matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import autograd as ad
from .numerics import checkpoint
from .numerics.nn import ShapeError, build_layers, init_tensors, mlp_forward, mlp_spec
from .numerics.train import minimize

HEAD_LAYOUT_VERSION = 1
HOI_LAYOUT = (("rot_a", 3), ("rot_b", 3), ("trans", 3), ("scale", 1), ("pose", 10))
HHI_LAYOUT = (("pose_ref", 10), ("rot_a", 3), ("rot_b", 3), ("trans", 3), ("pose_other", 10))
LAYOUTS = {"HOI": HOI_LAYOUT, "HHI": HHI_LAYOUT}

SAMPLE_FEATURES = 256
COND_FEATURES = 128
TIME_FEATURES = 128
N_FOURIER = 64
FOURIER_SCALE = 16.0
BUFFERS = ("time.fourier", "data.mean", "data.std", "data.gain")
MIN_DATA_STD = 1e-4
# trainable tensors are stored divided by this factor, so each Adam step moves
# the effective weights PARAM_SCALE times as far
PARAM_SCALE = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    eps: float = 1e-3

    def __post_init__(self) -> None:
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0 < self.eps < 1:
            raise ValueError("need 0 < eps < 1")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(t, dtype=np.float64)

    def sigma_dot(self, t):
        return self.sigma(t) * self.log_ratio

    def as_dict(self) -> dict:
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "eps": self.eps}


def sigma(t, sched: NoiseSchedule = NoiseSchedule()):
    """``sigma_min * (sigma_max / sigma_min) ** t`` for t in [eps, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < sched.eps - 1e-15) or np.any(t_arr > 1.0 + 1e-15):
        raise ValueError(f"t must lie in [{sched.eps}, 1], got {t}")
    return sched.sigma(t_arr)


def perturb(phi, t, sched: NoiseSchedule, rng: np.random.Generator, noise=None):
    phi = np.asarray(phi, dtype=np.float64)
    eta = rng.standard_normal(phi.shape) if noise is None else np.asarray(noise)
    return phi + np.expand_dims(sigma(t, sched), -1) * eta if np.ndim(t) else phi + sigma(t, sched) * eta


def dsm_target(phi, phi_t, t, sched: NoiseSchedule):
    s = sigma(t, sched)
    s = np.expand_dims(s, -1) if np.ndim(s) else s
    return (np.asarray(phi) - np.asarray(phi_t)) / s**2


# -- score network -----------------------------------------------------------


def network_spec(layout, cond_dim: int, trunk: int = 256, head_hidden: int = 128):
    dim = sum(n for _, n in layout)
    spec = {
        "sample": mlp_spec("sample", (dim, SAMPLE_FEATURES, SAMPLE_FEATURES), "relu"),
        "cond": mlp_spec("cond", (cond_dim, COND_FEATURES, COND_FEATURES), "relu"),
        "time": mlp_spec("time", (2 * N_FOURIER, TIME_FEATURES, TIME_FEATURES), "relu"),
        "trunk": mlp_spec(
            "trunk", (SAMPLE_FEATURES + COND_FEATURES + TIME_FEATURES, trunk), "relu"
        ),
    }
    for name, n in layout:
        spec[f"head.{name}"] = mlp_spec(f"head.{name}", (trunk, head_hidden, n))
    return spec


@dataclass
class ScoreNet:
    """Score model for one mode.

    ``tensors`` holds the weights plus fixed buffers: the Fourier projection
    of the time features, the per-coordinate mean and standard deviation of
    the training samples, and a baseline gain (1 for any real network). The
    score is the exact score of that moment-matched Gaussian after noising,
    plus the network output divided by sigma(t)::

        score(x, t) = -gain * (x - mean) / (sigma^2 + std^2) + F(x, t, c) / sigma

    so an untrained network already contracts noise towards the data, and the
    residual F regresses an O(1) target at every noise level.
    """

    tensors: dict[str, np.ndarray]
    mode: str
    layout: tuple
    cond_dim: int
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)
    trunk: int = 256
    head_hidden: int = 128

    @property
    def dim(self) -> int:
        return sum(n for _, n in self.layout)

    @property
    def spec(self):
        return network_spec(self.layout, self.cond_dim, self.trunk, self.head_hidden)

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in BUFFERS]

    @classmethod
    def init(cls, mode: str, cond_dim: int = 64, sched: NoiseSchedule | None = None,
             seed: int = 0, layout=None, trunk: int = 256, head_hidden: int = 128) -> "ScoreNet":  # fmt: skip
        layout = tuple(tuple(x) for x in (layout or LAYOUTS[mode]))
        rng = np.random.default_rng(seed)
        dim = sum(n for _, n in layout)
        tensors = {
            "time.fourier": rng.normal(0.0, FOURIER_SCALE, N_FOURIER),
            "data.mean": np.zeros(dim),
            "data.std": np.ones(dim),
            "data.gain": np.ones(1),
        }
        for specs in network_spec(layout, cond_dim, trunk, head_hidden).values():
            tensors.update(init_tensors(specs, rng))
        # zero output layers: training starts from the Gaussian baseline, and
        # a large random residual no longer drives the trunk units to die
        for name, _ in layout:
            last = network_spec(layout, cond_dim, trunk, head_hidden)[f"head.{name}"][-1][0]
            tensors[f"{last}.w"] = np.zeros_like(tensors[f"{last}.w"])
        for k in tensors:
            if k not in BUFFERS:
                tensors[k] = tensors[k] / PARAM_SCALE
        return cls(tensors, mode, layout, cond_dim, sched or NoiseSchedule(), trunk, head_hidden)

    def zeroed(self) -> "ScoreNet":
        """Every tensor zero, baseline gain included: the score is identically zero."""
        return self._replace({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def baseline_only(self) -> "ScoreNet":
        """Same buffers, all weights zero: the score reduces to the Gaussian baseline."""
        return self._replace({k: (v if k in BUFFERS else np.zeros_like(v)) for k, v in self.tensors.items()})

    def _replace(self, tensors) -> "ScoreNet":
        return ScoreNet(tensors, self.mode, self.layout, self.cond_dim, self.sched, self.trunk, self.head_hidden)

    def __call__(self, x, t, c):
        return score_forward(self, x, t, c)

    # -- persistence
    def meta(self) -> dict:
        return {
            "kind": "score_net",
            "mode": self.mode,
            "layout": [list(x) for x in self.layout],
            "head_layout_version": HEAD_LAYOUT_VERSION,
            "cond_dim": self.cond_dim,
            "schedule": self.sched.as_dict(),
            "trunk": self.trunk,
            "head_hidden": self.head_hidden,
        }

    def save(self, path, extra: dict | None = None) -> None:
        checkpoint.save(path, self.tensors, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "ScoreNet":
        tensors, meta = checkpoint.load(path)
        return cls.from_checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, tensors, meta) -> "ScoreNet":
        if meta.get("kind") != "score_net":
            raise checkpoint.CheckpointError("not a score network checkpoint")
        if meta.get("head_layout_version") != HEAD_LAYOUT_VERSION:
            raise checkpoint.CheckpointError("unsupported head layout version")
        return cls(
            tensors,
            meta["mode"],
            tuple((str(n), int(k)) for n, k in meta["layout"]),
            int(meta["cond_dim"]),
            NoiseSchedule(**meta["schedule"]),
            int(meta["trunk"]),
            int(meta["head_hidden"]),
        )


def time_features(fourier: np.ndarray, t) -> np.ndarray:
    proj = 2.0 * np.pi * np.asarray(t, dtype=np.float64)[..., None] * fourier
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


def raw_forward(tensors, net: ScoreNet, x, t, c):
    """Head outputs before the 1/sigma(t) scaling; ``x`` may be a tape variable.

    A single condition vector or a scalar time is embedded once and broadcast,
    and the trunk's first layer is applied blockwise so those shared features
    cost one row each.
    """
    spec = net.spec
    tensors = {k: (v if k in BUFFERS else v * PARAM_SCALE) for k, v in tensors.items()}
    xv = ad.value(x)
    batch = xv.shape[:-1]
    t_arr = np.asarray(t, dtype=np.float64)
    c_arr = np.asarray(c, dtype=np.float64)
    t_rows = t_arr.reshape(1) if t_arr.ndim == 0 else np.broadcast_to(t_arr, batch)
    c_rows = c_arr.reshape(1, -1) if c_arr.ndim == 1 else np.broadcast_to(c_arr, batch + (net.cond_dim,))
    # standardise the sample against the noised data moments
    var = np.expand_dims(net.sched.sigma(t_rows), -1) ** 2 + tensors["data.std"] ** 2
    c_in = 1.0 / np.sqrt(var[0] if t_arr.ndim == 0 else var)
    f_x = mlp_forward(build_layers(tensors, spec["sample"]), (x - tensors["data.mean"]) * c_in)
    if c_rows.shape[0] > 1:
        # prompts repeat heavily within a batch; embed each distinct one once
        uniq, inverse = np.unique(c_rows.reshape(-1, net.cond_dim), axis=0, return_inverse=True)
        f_c = mlp_forward(build_layers(tensors, spec["cond"]), uniq)
        f_c = ad.reshape(ad.getitem(f_c, inverse.reshape(-1)), c_rows.shape[:-1] + (COND_FEATURES,))
    else:
        f_c = mlp_forward(build_layers(tensors, spec["cond"]), c_rows)
    f_t = mlp_forward(build_layers(tensors, spec["time"]), time_features(tensors["time.fourier"], t_rows))
    (name, _, _), = spec["trunk"]
    w = tensors[f"{name}.w"]
    cut = (SAMPLE_FEATURES, SAMPLE_FEATURES + COND_FEATURES)

    def block(f, lo, hi):
        return ad.matmul(f, ad.transpose(ad.getitem(w, (slice(None), slice(lo, hi)))))

    shared = block(f_c, cut[0], cut[1]) + block(f_t, cut[1], None) + tensors[f"{name}.b"]
    h = ad.relu(block(f_x, 0, cut[0]) + shared)
    heads = [mlp_forward(build_layers(tensors, spec[f"head.{name}"]), h) for name, _ in net.layout]
    out = ad.concat(heads, axis=-1)
    if ad.value(out).shape != xv.shape:
        # a single sample met a one-row condition or time embedding
        out = ad.reshape(out, xv.shape)
    return out, np.broadcast_to(t_arr, batch)


def gaussian_score(tensors, sched: NoiseSchedule, x, t):
    """Score of N(mean, diag(std^2)) after adding N(0, sigma(t)^2) noise."""
    var = np.expand_dims(sched.sigma(t), -1) ** 2 + tensors["data.std"] ** 2
    return -(x - tensors["data.mean"]) * (tensors["data.gain"] / var)


def score_forward(net: ScoreNet, x, t, c, tensors=None):
    xv = ad.value(x)
    if xv.shape[-1] != net.dim:
        raise ShapeError(f"{net.mode} sample must have {net.dim} entries, got {xv.shape[-1]}")
    if np.shape(c)[-1] != net.cond_dim:
        raise ShapeError(f"condition must have {net.cond_dim} entries, got {np.shape(c)[-1]}")
    tensors = net.tensors if tensors is None else tensors
    raw, t_arr = raw_forward(tensors, net, x, t, c)
    return gaussian_score(tensors, net.sched, x, t_arr) + raw / net.sched.sigma(t_arr)[..., None]


# -- training ----------------------------------------------------------------


@dataclass
class ScoreTrainConfig:
    epochs: int = 20000
    batch_size: int = 500
    seed: int = 0
    trunk: int = 256
    head_hidden: int = 128
    # decay of the weight average that is returned; None returns the last iterate
    ema: float | None = 0.999


def auto_batch_size(n_samples: int, cap: int = 500, min_steps: int = 20) -> int:
    """Largest batch up to ``cap`` that still gives ``min_steps`` updates per epoch."""
    return max(1, min(cap, n_samples // min_steps))


def dsm_loss(net: ScoreNet, tensors, phi, cond, t, eta):
    """Mean over batch and coordinates of ``sigma(t)^2 * (score - target)^2``."""
    s = net.sched.sigma(t)[:, None]
    phi_t = phi + s * eta
    target = (phi - phi_t) / s**2
    score = score_forward(net, phi_t, t, cond, tensors)
    return ad.mean(ad.square(score - target) * s**2)


def train_score(samples, conds, mode: str, sched: NoiseSchedule | None = None,
                config: ScoreTrainConfig | None = None, layout=None, report=None):  # fmt: skip
    """Fit a score network by sigma^2-weighted denoising score matching.

    ``samples`` is (n, d), ``conds`` (n, C) or a single (C,) vector. Returns
    the network and its per-epoch loss curve.
    """
    config = config or ScoreTrainConfig()
    sched = sched or NoiseSchedule()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or not len(samples):
        raise ValueError("need a non-empty (n, d) sample array")
    conds = np.asarray(conds, dtype=np.float64)
    if conds.ndim == 1:
        conds = np.broadcast_to(conds, (len(samples), conds.size))
    net = ScoreNet.init(mode, conds.shape[1], sched, config.seed, layout, config.trunk, config.head_hidden)
    net.tensors["data.mean"] = samples.mean(0)
    net.tensors["data.std"] = np.maximum(samples.std(0), MIN_DATA_STD)
    if samples.shape[1] != net.dim:
        raise ShapeError(f"{mode} samples must have {net.dim} columns, got {samples.shape[1]}")
    rng = np.random.default_rng(config.seed)
    # a single shared prompt is passed as one vector so it is embedded once per step
    shared = conds[0] if np.all(conds == conds[0]) else None

    def batch_loss(tensors, idx):
        t = rng.uniform(sched.eps, 1.0, len(idx))
        eta = rng.standard_normal((len(idx), net.dim))
        cond = conds[idx] if shared is None else shared
        return dsm_loss(net, tensors, samples[idx], cond, t, eta)

    def on_epoch(epoch, loss, _):
        if report is not None:
            report({"epoch": epoch, "loss": loss})

    tensors, history = minimize(
        net.tensors, batch_loss, len(samples), config.epochs, config.batch_size, rng,
        trainable=net.trainable, on_epoch=on_epoch, ema=config.ema,
    )  # fmt: skip
    net.tensors = tensors
    return net, history
