"""Dense MLP with a hand-written reverse pass, plus Adam.

Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
(fan_in, fan_out). ``forward`` accepts a single vector or a batch of rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "identity", "softplus")


class StaleTapeError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def orthogonal(shape, gain, rng):
    a = rng.standard_normal(shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return gain * q


@dataclass
class Tape:
    inputs: list
    pre: list
    batched: bool
    version: int


class Mlp:
    def __init__(self, sizes, activations, rng=None, hidden_gain=1.0, out_gain=1.0):
        sizes = [int(s) for s in sizes]
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = tuple(sizes)
        self.activations = tuple(activations)
        self.version = 0
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            gain = out_gain if i == n_layers - 1 else hidden_gain
            self.params.append(orthogonal((sizes[i], sizes[i + 1]), gain, rng))
            self.params.append(np.zeros(sizes[i + 1]))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def weights(self, i):
        return self.params[2 * i], self.params[2 * i + 1]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        batched = x.ndim == 2
        if x.shape[-1] != self.sizes[0] or x.ndim not in (1, 2):
            raise ValueError(f"input shape {x.shape} does not match input size {self.sizes[0]}")
        inputs, pre = [], []
        h = x
        for i, act in enumerate(self.activations):
            W, b = self.weights(i)
            inputs.append(h)
            z = h @ W + b
            pre.append(z)
            if act == "tanh":
                h = np.tanh(z)
            elif act == "softplus":
                h = softplus(z)
            else:
                h = z
        return h, Tape(inputs, pre, batched, self.version)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape: Tape, output_grad):
        """Gradient of sum(output_grad * output) w.r.t. every parameter (summed over a batch)."""
        if tape.version != self.version:
            raise StaleTapeError("tape was recorded before the last parameter update")
        g = np.asarray(output_grad, dtype=float)
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            act = self.activations[i]
            z = tape.pre[i]
            if act == "tanh":
                g = g * (1.0 - np.tanh(z) ** 2)
            elif act == "softplus":
                g = g * sigmoid(z)
            inp = tape.inputs[i]
            if tape.batched:
                grads[2 * i] = inp.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            else:
                grads[2 * i] = np.outer(inp, g)
                grads[2 * i + 1] = g.copy()
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads

    def bump(self):
        """Mark parameters as changed so older tapes are rejected."""
        self.version += 1

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.sizes, new.activations, new.version = self.sizes, self.activations, 0
        new.params = [p.copy() for p in self.params]
        return new

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activations": list(self.activations),
            "weights": [self.params[2 * i].tolist() for i in range(self.n_layers)],
            "biases": [self.params[2 * i + 1].tolist() for i in range(self.n_layers)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls.__new__(cls)
        net.sizes = tuple(int(s) for s in d["sizes"])
        net.activations = tuple(d["activations"])
        net.version = 0
        net.params = []
        for W, b in zip(d["weights"], d["biases"]):
            net.params.append(np.array(W, dtype=float).reshape(-1, len(b)))
            net.params.append(np.array(b, dtype=float))
        for i in range(net.n_layers):
            if net.params[2 * i].shape != (net.sizes[i], net.sizes[i + 1]):
                raise ValueError("checkpoint weights do not match layer sizes")
        return net


def zeros_like_params(params):
    return [np.zeros_like(p) for p in params]


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params), **kw)

    def to_dict(self) -> dict:
        return {
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, d: dict, params) -> "AdamState":
        m = [np.array(a, dtype=float).reshape(p.shape) for a, p in zip(d["m"], params)]
        v = [np.array(a, dtype=float).reshape(p.shape) for a, p in zip(d["v"], params)]
        return cls(m, v, d["t"], d["lr"], d["beta1"], d["beta2"], d["eps"], d.get("skipped", 0))


def adam_step(params, grads, state: AdamState) -> bool:
    """In-place bias-corrected Adam update. Returns False (and skips) on non-finite grads."""
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True
