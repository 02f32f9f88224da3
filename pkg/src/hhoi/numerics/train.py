"""Minibatch Adam loop shared by the pose codec and the score networks."""

from __future__ import annotations

import logging
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ad
from .nn import flatten, unflatten
from .optim import AdamState, TrainingError, adam_step

log = logging.getLogger(__name__)


def minimize(
    tensors: Mapping[str, np.ndarray],
    batch_loss: Callable[[dict, np.ndarray], object],
    n_items: int,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    trainable: Sequence[str] | None = None,
    on_epoch: Callable[[int, float, dict], None] | None = None,
    ema: float | None = None,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Optimise ``tensors`` with Adam over shuffled minibatches.

    ``batch_loss(watched, idx)`` receives the trainable tensors as tape
    variables (frozen ones as arrays) plus the minibatch item indices, and
    returns a scalar. Returns the final tensors and per-epoch mean losses.
    With ``ema`` set, the returned weights are the exponential moving average
    (that decay per step) of the iterates rather than the last iterate.
    """
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    names = list(trainable) if trainable is not None else list(tensors)
    shapes = {k: tensors[k].shape for k in names}
    flat = flatten(tensors, names)
    state = AdamState.zeros_like(flat)
    avg = flat.copy() if ema is not None else None
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n_items)
        losses = []
        for start in range(0, n_items, batch_size):
            idx = order[start : start + batch_size]
            current = dict(tensors)
            current.update(unflatten(flat, shapes))
            with ad.Tape() as tape:
                watched = dict(current)
                for k in names:
                    watched[k] = tape.watch(current[k])
                loss = batch_loss(watched, idx)
            value = float(ad.value(loss))
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {state.step}")
            grads = tape.gradient(loss, [watched[k] for k in names])
            flat, state = adam_step(flat, np.concatenate([g.ravel() for g in grads]), state)
            if avg is not None:
                avg = ema * avg + (1.0 - ema) * flat
            losses.append(value)
        history.append(float(np.mean(losses)))
        tensors.update(unflatten((flat if avg is None else avg).copy(), shapes))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], tensors)
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return tensors, history
