"""Minimal feedforward networks with exact reverse-mode gradients and Adam.

Hidden layers use the rectifier (subgradient 0 at exactly 0); the output
activation is identity, tanh, or sigmoid. Parameters live in a flat list
[W0, b0, W1, b1, ...] so optimizers and target-network blends can treat every
network uniformly. All math is float64 numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import RngStream

OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid")


class Mlp:
    def __init__(self, sizes: list[int], output_activation: str = "identity",
                 rng: RngStream | None = None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.sizes = list(sizes)
        self.output_activation = output_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = params[2 * i]
            self.biases[i] = params[2 * i + 1]

    def clone(self) -> Mlp:
        other = Mlp(self.sizes, self.output_activation)
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _apply_output(self, z: np.ndarray) -> np.ndarray:
        if self.output_activation == "tanh":
            return np.tanh(z)
        if self.output_activation == "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
        return z

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(np.asarray(x, dtype=float))
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping the per-layer inputs and pre-activations
        needed by ``backward``. Accepts (batch, in) or a single (in,) vector."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input dim {x.shape[1]} != {self.sizes[0]}")
        inputs = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            h = self._apply_output(z) if i == last else np.maximum(z, 0.0)
            if i != last:
                inputs.append(h)
        cache = (inputs, pre, squeeze)
        return (h[0] if squeeze else h), cache

    def backward(self, cache, upstream: np.ndarray):
        """Exact gradients for a previous ``forward_cached`` call.

        Returns (param_grads, input_grad); ``param_grads`` aligns with
        ``params`` and sums over the batch.
        """
        inputs, pre, squeeze = cache
        g = np.asarray(upstream, dtype=float)
        if squeeze:
            g = g[None, :]
        if g.shape != pre[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {pre[-1].shape}")
        z_out = pre[-1]
        if self.output_activation == "tanh":
            g = g * (1.0 - np.tanh(z_out) ** 2)
        elif self.output_activation == "sigmoid":
            s = 1.0 / (1.0 + np.exp(-z_out))
            g = g * s * (1.0 - s)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (pre[i - 1] > 0.0)
        return grads, (g[0] if squeeze else g)


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    return mlp.forward(x)


def backward(mlp: Mlp, x: np.ndarray, upstream: np.ndarray):
    _, cache = mlp.forward_cached(x)
    return mlp.backward(cache, upstream)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = None
    v: list = None
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 3e-4) -> AdamState:
        return cls(lr=lr,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params``. NaN/Inf in the
    gradients is a hard error so that divergence fails fast."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def polyak_blend(online: list[np.ndarray], target: list[np.ndarray], tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    for p, t in zip(online, target):
        t *= 1.0 - tau
        t += tau * p


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_error: float
    worst_param: tuple  # (param index in flat list, flat entry index)
    tolerance: float


def grad_check(mlp: Mlp, loss_fn, tolerance: float = 1e-4,
               step: float = 1e-5, max_entries_per_param: int = 0) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    ``loss_fn`` maps the network output (batch, out) to (scalar loss,
    upstream gradient dloss/doutput). Set ``max_entries_per_param`` to probe a
    random subset of entries on large nets; 0 checks every entry.
    """
    x = loss_fn.inputs
    y, cache = mlp.forward_cached(x)
    _, upstream = loss_fn(y)
    grads, _ = mlp.backward(cache, upstream)

    worst = 0.0
    worst_param = (-1, -1)
    params = mlp.params
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        gflat = grads[pi].reshape(-1)
        entries = range(flat.size)
        if max_entries_per_param and flat.size > max_entries_per_param:
            stride = flat.size // max_entries_per_param
            entries = range(0, flat.size, stride)
        for ei in entries:
            orig = flat[ei]
            flat[ei] = orig + step
            lp, _ = loss_fn(mlp.forward(x))
            flat[ei] = orig - step
            lm, _ = loss_fn(mlp.forward(x))
            flat[ei] = orig
            numeric = (lp - lm) / (2.0 * step)
            # Floor the denominator: below ~1e-6 the central difference is
            # dominated by cancellation noise and absolute agreement is what
            # can actually be measured.
            denom = max(abs(numeric), abs(gflat[ei]), 1e-6)
            rel = abs(numeric - gflat[ei]) / denom
            if rel > worst:
                worst = rel
                worst_param = (pi, ei)
    return GradCheckReport(passed=worst < tolerance, worst_rel_error=worst,
                           worst_param=worst_param, tolerance=tolerance)


class SquaredErrorLoss:
    """Mean squared error against fixed targets; usable with grad_check."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray):
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)

    def __call__(self, outputs: np.ndarray):
        diff = outputs - self.targets
        n = diff.size
        return float(np.sum(diff ** 2) / n), 2.0 * diff / n


# ---------------------------------------------------------------------------
# Checkpoint format: JSON with a layer-size header, one flat list per array.
# ---------------------------------------------------------------------------

def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "sizes": mlp.sizes,
        "output_activation": mlp.output_activation,
        "weights": [W.tolist() for W in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    mlp = Mlp(doc["sizes"], doc["output_activation"])
    mlp.weights = [np.asarray(W, dtype=float) for W in doc["weights"]]
    mlp.biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    for W, b, fan_in, fan_out in zip(mlp.weights, mlp.biases, mlp.sizes[:-1], mlp.sizes[1:]):
        if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError("checkpoint arrays do not match the layer-size header")
    return mlp


def save_mlp(mlp: Mlp, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(mlp), fh)


def load_mlp(path: str) -> Mlp:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))
