"""Dense numeric helpers shared by the model and the baselines.

Arrays are plain numpy float64 by default. Parameter collections are
``dict[str, np.ndarray]`` with a stable key order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(x)


def masked_softmax(logits, valid_len: int | None = None, mask=None, axis: int = -1):
    """Softmax over the first ``valid_len`` entries (or where ``mask`` is true).

    Masked entries come out exactly 0. Rows are max-shifted before
    exponentiation.
    """
    z = np.asarray(logits, dtype=float)
    if mask is None:
        n = z.shape[axis]
        if valid_len is None:
            valid_len = n
        if not 1 <= valid_len <= n:
            raise ValueError(f"valid_len must be in 1..{n}, got {valid_len}")
        shape = [1] * z.ndim
        shape[axis] = n
        mask = (np.arange(n) < valid_len).reshape(shape)
    mask = np.broadcast_to(mask, z.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("every softmax row needs at least one valid entry")
    shifted = np.where(mask, z, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if p <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def make_rng(seed, *stream) -> np.random.Generator:
    """Generator for ``seed`` and an optional stream path, e.g. ``make_rng(7, epoch, batch)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; L2 enters as ``l2 * param`` added to the gradient.

    Returns new parameter arrays; the inputs are not modified.
    """
    if params.keys() != grads.keys():
        raise ValueError("params and grads have different keys")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(f"{name}: shape {params[name].shape} vs grad {grads[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new = {}
    for name, p in params.items():
        g = grads[name] + state.l2 * p if state.l2 else grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


def finite_diff_grad(loss_fn: Callable[[dict], float], params: dict, h: float = 1e-5) -> dict:
    """Central-difference gradient of ``loss_fn`` for every entry of every array."""
    grads = {}
    for name, p in params.items():
        base = np.array(p, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn({**params, name: base})
            flat[i] = orig - h
            down = loss_fn({**params, name: base})
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads
