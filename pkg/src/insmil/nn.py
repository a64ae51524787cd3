"""Dense numerical core: perceptrons with hand-written backprop, SGD with
classic momentum, EMA parameter mirrors, and finite-difference gradient
checking.

Everything runs in float64.  The computation graph is fixed and
hand-differentiated; there is no autodiff.  Weight layout is ``x @ W + b``
with ``W`` of shape (fan_in, fan_out), relu on hidden layers, identity on the
output layer.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigurationError, DimensionError, NumericalError,
                     UsageError, ValidationError)


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Return (v / ||v||, degenerate).  Vectors with norm <= eps are returned
    unchanged with degenerate=True."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= eps:
        return v.copy(), True
    return v / norm, False


def normalize_rows(m: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization; degenerate rows (norm <= eps) pass through.

    Returns (normalized, norms); norms keeps the raw values so the backward
    pass can invert the operation row by row.
    """
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms > eps, norms, 1.0)
    return m / safe[:, None], norms


def normalize_rows_backward(grad_out: np.ndarray, normalized: np.ndarray,
                            norms: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Backprop through normalize_rows.  For unit output q = u/||u||:
    du = (dq - q (q . dq)) / ||u||; degenerate rows pass the gradient through."""
    dots = np.sum(grad_out * normalized, axis=1, keepdims=True)
    grad_in = (grad_out - normalized * dots) / np.where(norms > eps, norms, 1.0)[:, None]
    degenerate = norms <= eps
    if np.any(degenerate):
        grad_in[degenerate] = grad_out[degenerate]
    return grad_in


@dataclass
class MlpCache:
    net: "Mlp"
    x: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # post-relu hidden outputs, input first


class Mlp:
    """Fully connected net over row-major batches.

    ``layer_dims`` lists the input dimension first; the net applies
    ``relu(x @ W + b)`` on hidden layers and a plain affine map on the
    output layer.  Initial weights are uniform in
    +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """

    def __init__(self, layer_dims: list[int], rng: np.random.Generator | None = None):
        if len(layer_dims) < 2:
            raise ConfigurationError("layer_dims needs at least input and output dims")
        if any(d < 1 for d in layer_dims):
            raise ConfigurationError(f"layer_dims must be positive, got {layer_dims}")
        self.layer_dims = list(layer_dims)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Live references, ordered [W0, b0, W1, b1, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, values: list[np.ndarray]) -> None:
        own = self.params()
        if len(values) != len(own):
            raise DimensionError(
                f"expected {len(own)} parameter arrays, got {len(values)}")
        for dst, src in zip(own, values):
            src = np.asarray(src, dtype=np.float64)
            if dst.shape != src.shape:
                raise DimensionError(
                    f"parameter shape mismatch: {dst.shape} vs {src.shape}")
            dst[...] = src

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.layer_dims = list(self.layer_dims)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionError(f"expected a 2-D batch, got shape {x.shape}")
        if x.shape[1] != self.layer_dims[0]:
            raise DimensionError(
                f"layer 0 expects input dim {self.layer_dims[0]}, got {x.shape[1]}")
        pre, acts = [], [x]
        h = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if l < self.n_layers - 1 else z
            acts.append(h)
        return h, MlpCache(net=self, x=x, pre_activations=pre, activations=acts)

    def backward(self, cache: MlpCache,
                 grad_output: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients in params() order plus the gradient w.r.t. the input."""
        if cache.net is not self:
            raise UsageError("backward called with a cache from a different net")
        grad_output = np.asarray(grad_output, dtype=np.float64)
        if grad_output.shape != cache.activations[-1].shape:
            raise DimensionError(
                f"grad_output shape {grad_output.shape} does not match forward "
                f"output {cache.activations[-1].shape}")
        grads_w = [np.empty(0)] * self.n_layers
        grads_b = [np.empty(0)] * self.n_layers
        delta = grad_output
        for l in range(self.n_layers - 1, -1, -1):
            if l < self.n_layers - 1:  # relu derivative on hidden layers
                delta = delta * (cache.pre_activations[l] > 0.0)
            a_prev = cache.activations[l]
            grads_w[l] = a_prev.T @ delta
            grads_b[l] = delta.sum(axis=0)
            delta = delta @ self.weights[l].T
        flat: list[np.ndarray] = []
        for gw, gb in zip(grads_w, grads_b):
            flat.append(gw)
            flat.append(gb)
        return flat, delta


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray,
                 targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against soft target rows.

    Each target row must lie on the probability simplex (tolerance 1e-9).
    Returns (loss, grad_logits) with grad = (softmax - target) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise DimensionError(
            f"logits {logits.shape} and targets {targets.shape} must be equal 2-D shapes")
    if np.any(targets < -1e-9) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("target rows must lie on the probability simplex")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = logits.shape[0]
    loss = float(-(targets * log_probs).sum() / n)
    grad = (np.exp(log_probs) - targets) / n
    return loss, grad


class SgdMomentum:
    """Classic (heavy-ball) momentum: v <- m v + g; p <- p - lr v."""

    def __init__(self, learning_rate: float = 0.01, momentum: float = 0.9):
        if learning_rate <= 0.0:
            raise ConfigurationError(f"learning_rate must be > 0, got {learning_rate}")
        if not (0.0 <= momentum < 1.0):
            raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocities: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise DimensionError(
                f"{len(params)} params but {len(grads)} gradient arrays")
        if self.velocities is None:
            self.velocities = [np.zeros_like(p) for p in params]
        if len(self.velocities) != len(params):
            raise DimensionError("optimizer state does not match the parameter list")
        for p, g, v in zip(params, grads, self.velocities):
            if p.shape != g.shape or p.shape != v.shape:
                raise DimensionError(
                    f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
            v *= self.momentum
            v += g
            p -= self.learning_rate * v


class EmaPair:
    """Online parameters plus a shadow copy updated by exponential moving
    average: shadow <- m * shadow + (1 - m) * online, elementwise."""

    def __init__(self, online: list[np.ndarray], shadow: list[np.ndarray], m: float):
        if not (0.0 <= m <= 1.0):
            raise ConfigurationError(f"ema coefficient must lie in [0, 1], got {m}")
        if len(online) != len(shadow):
            raise DimensionError("online and shadow parameter lists differ in length")
        for o, s in zip(online, shadow):
            if o.shape != s.shape:
                raise DimensionError(
                    f"online/shadow shape mismatch: {o.shape} vs {s.shape}")
        self.online = online
        self.shadow = shadow
        self.m = m

    def update(self) -> None:
        for o, s in zip(self.online, self.shadow):
            s *= self.m
            s += (1.0 - self.m) * o


@dataclass
class GradcheckReport:
    max_rel_err: float
    tolerance: float
    worst_block: str
    worst_index: tuple
    worst_analytic: float
    worst_numeric: float
    per_block: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_err:.3e} "
                f"(tolerance {self.tolerance:.1e}) at {self.worst_block}{list(self.worst_index)} "
                f"analytic={self.worst_analytic:.6e} numeric={self.worst_numeric:.6e}")


def gradcheck(loss_and_grad_fn, params: list[np.ndarray],
              epsilon: float = 1e-6, tolerance: float = 1e-5,
              param_names: list[str] | None = None) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad_fn(params) -> (loss, grads)`` must be deterministic and
    must not retain references into ``params``.  The relative error uses a
    unit floor, |a - n| / max(1, |a|, |n|), so near-zero gradients are judged
    on absolute scale rather than amplified finite-difference noise.
    """
    names = param_names if param_names is not None else [
        f"param{i}" for i in range(len(params))]
    if len(names) != len(params):
        raise UsageError("param_names length must match params")
    base_loss, analytic = loss_and_grad_fn(params)
    if not math.isfinite(base_loss):
        raise NumericalError(f"loss is non-finite at the base point: {base_loss}")
    if len(analytic) != len(params):
        raise DimensionError("analytic gradient list does not match params")

    worst = (-1.0, "", (), 0.0, 0.0)
    per_block: dict[str, float] = {}
    for name, p, a in zip(names, params, analytic):
        if a.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {a.shape}, "
                                 f"param has {p.shape}")
        block_worst = 0.0
        it = np.ndindex(p.shape) if p.ndim else [()]
        for idx in it:
            orig = p[idx]
            p[idx] = orig + epsilon
            loss_plus, _ = loss_and_grad_fn(params)
            p[idx] = orig - epsilon
            loss_minus, _ = loss_and_grad_fn(params)
            p[idx] = orig
            if not (math.isfinite(loss_plus) and math.isfinite(loss_minus)):
                raise NumericalError(f"non-finite loss while perturbing {name}{idx}")
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            a_val = float(a[idx])
            rel = abs(a_val - numeric) / max(1.0, abs(a_val), abs(numeric))
            block_worst = max(block_worst, rel)
            if rel > worst[0]:
                worst = (rel, name, idx, a_val, numeric)
        per_block[name] = block_worst
    return GradcheckReport(
        max_rel_err=worst[0], tolerance=tolerance, worst_block=worst[1],
        worst_index=worst[2], worst_analytic=worst[3], worst_numeric=worst[4],
        per_block=per_block)


def clone_params(params: list[np.ndarray]) -> list[np.ndarray]:
    return [p.copy() for p in params]


def params_allclose(a: list[np.ndarray], b: list[np.ndarray],
                    rtol: float = 0.0, atol: float = 0.0) -> bool:
    return len(a) == len(b) and all(
        np.allclose(x, y, rtol=rtol, atol=atol) for x, y in zip(a, b))


def copy_into(dst: list[np.ndarray], src: list[np.ndarray]) -> None:
    for d, s in zip(dst, src):
        d[...] = s


def deep_copy_net(net: Mlp) -> Mlp:
    return copy.deepcopy(net)
