"""Dense layers and MLP stacks, parameterised by named flat tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ad


class ShapeError(ValueError):
    pass


ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    """``y = act(x @ weights.T + bias)``; weights are ``[out, in]``.

    ``weights`` and ``bias`` may be plain arrays or tape variables.
    """

    weights: object
    bias: object
    activation: str = "relu"

    def __post_init__(self) -> None:
        w, b = ad.value(self.weights), ad.value(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"weights {w.shape} and bias {b.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return ad.value(self.weights).shape[1]

    @property
    def out_dim(self) -> int:
        return ad.value(self.weights).shape[0]

    def __call__(self, x):
        y = ad.matmul(x, ad.transpose(self.weights)) + self.bias
        return ad.relu(y) if self.activation == "relu" else y


def mlp_forward(layers: Sequence[DenseLayer], x):
    """Apply ``layers`` in order to ``x`` (a vector or a batch of row vectors)."""
    if not layers:
        return x
    n_in = ad.value(x).shape[-1]
    if n_in != layers[0].in_dim:
        raise ShapeError(f"input has {n_in} features, first layer expects {layers[0].in_dim}")
    for layer in layers:
        x = layer(x)
    return x


def mlp_spec(prefix: str, dims: Sequence[int], out_activation: str = "identity"):
    """Tensor specs ``(name, shape, activation)`` for an MLP ``dims[0] -> ... -> dims[-1]``."""
    n = len(dims) - 1
    specs = []
    for k in range(n):
        act = "relu" if k < n - 1 else out_activation
        specs.append((f"{prefix}.{k}", (dims[k + 1], dims[k]), act))
    return specs


def init_tensors(specs, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-uniform weights for relu layers, Glorot-uniform otherwise; zero biases."""
    out: dict[str, np.ndarray] = {}
    for name, (fan_out, fan_in), act in specs:
        if act == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        out[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        out[f"{name}.b"] = np.zeros(fan_out)
    return out


def build_layers(tensors: Mapping[str, object], specs) -> list[DenseLayer]:
    return [DenseLayer(tensors[f"{n}.w"], tensors[f"{n}.b"], act) for n, _, act in specs]


def flatten(tensors: Mapping[str, np.ndarray], names: Iterable[str]) -> np.ndarray:
    return np.concatenate([np.asarray(tensors[n], dtype=np.float64).ravel() for n in names])


def unflatten(flat: np.ndarray, shapes: Mapping[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    need = sum(int(np.prod(shape)) for shape in shapes.values())
    if need != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, layout needs {need}")
    out, offset = {}, 0
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        out[name] = flat[offset : offset + count].reshape(shape)
        offset += count
    return out


def lipschitz_bound(layers: Sequence[DenseLayer]) -> float:
    """Product of spectral norms; relu is 1-Lipschitz."""
    return float(np.prod([np.linalg.norm(ad.value(l.weights), 2) for l in layers]))
