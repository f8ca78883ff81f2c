"""Small MLPs with manual backprop, plus the synthetic tasks used to drive the optimizers.

Weights follow the ``Y = X W^T`` convention, ``W`` of shape ``(d_out, d_in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .manifold import Kind
from .rng import Xoshiro256, derive_seed

ACTIVATIONS = ("identity", "relu", "swiglu", "norm_gated_swiglu")
PRE_NORMS = ("none", "parameter_free_rms", "learnable_rms")
TASKS = ("frobenius_nearest_point", "linear_regression", "synthetic_classification")


class ModelError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    d_in: int
    d_out: int
    activation: str = "identity"
    pre_norm: str = "none"
    constrained: bool = True
    manifold: Optional[str] = "frobenius_sphere"
    radius: Optional[float] = None
    gate_per_row: bool = False

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pre_norm not in PRE_NORMS:
            raise ValueError(f"unknown pre_norm {self.pre_norm!r}")
        if self.constrained:
            if self.manifold is None:
                raise ValueError("constrained layers need a manifold kind")
            object.__setattr__(self, "manifold", Kind.parse(self.manifold).value)

    @property
    def weight_names(self) -> tuple[str, ...]:
        return ("w1", "w2") if self.activation in ("swiglu", "norm_gated_swiglu") else ("w",)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def swish(z):
    return z * sigmoid(z)


def swish_grad(z):
    s = sigmoid(z)
    return s + z * s * (1.0 - s)


RMS_EPS = 1e-12


def _row_rms(x):
    # the epsilon only matters for all-zero rows (dead ReLU units), which map to zero
    return np.sqrt(np.mean(x * x, axis=1, keepdims=True) + RMS_EPS)


def rms_normalize(x):
    """Parameter-free RMS normalization of each row."""
    return x / _row_rms(x)


def forward(layer: LayerSpec, params: dict, x: np.ndarray):
    """Return ``(y, cache)`` for one layer."""
    cache = {"x": x}
    h = x
    if layer.pre_norm != "none":
        rho = _row_rms(x)
        xhat = x / rho
        cache.update(rho=rho, xhat=xhat)
        h = xhat * params["gamma"] if layer.pre_norm == "learnable_rms" else xhat
    cache["h"] = h

    if layer.activation in ("identity", "relu"):
        z = h @ params["w"].T
        cache["z"] = z
        y = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return y, cache

    z1 = h @ params["w1"].T
    z2 = h @ params["w2"].T
    s = swish(z1)
    cache.update(z1=z1, z2=z2, s=s)
    if layer.activation == "swiglu":
        return s * z2, cache
    if layer.gate_per_row:
        r = np.sqrt(np.mean(s * s, axis=1, keepdims=True))
        if np.any(r == 0):
            raise ModelError("norm-gated SwiGLU: zero RMS in the Swish branch")
    else:
        r = np.sqrt(np.mean(s * s))
        if r == 0:
            raise ModelError("norm-gated SwiGLU: zero RMS in the Swish branch")
    shat = s / r
    cache.update(r=r, shat=shat)
    return shat * z2, cache


def backward(layer: LayerSpec, params: dict, cache: dict, dy: np.ndarray):
    """Return ``(dx, grads)`` where ``grads`` maps parameter names to gradients."""
    grads = {}
    h = cache["h"]
    if layer.activation in ("identity", "relu"):
        dz = dy * (cache["z"] > 0) if layer.activation == "relu" else dy
        grads["w"] = dz.T @ h
        dh = dz @ params["w"]
    else:
        z1, z2, s = cache["z1"], cache["z2"], cache["s"]
        if layer.activation == "swiglu":
            dz2 = dy * s
            ds = dy * z2
        else:
            shat, r = cache["shat"], cache["r"]
            dz2 = dy * shat
            g = dy * z2
            if layer.gate_per_row:
                ds = (g - shat * np.mean(g * shat, axis=1, keepdims=True)) / r
            else:
                ds = (g - shat * np.mean(g * shat)) / r
        dz1 = ds * swish_grad(z1)
        grads["w1"] = dz1.T @ h
        grads["w2"] = dz2.T @ h
        dh = dz1 @ params["w1"] + dz2 @ params["w2"]

    if layer.pre_norm == "none":
        return dh, grads
    xhat, rho = cache["xhat"], cache["rho"]
    if layer.pre_norm == "learnable_rms":
        grads["gamma"] = np.sum(dh * xhat, axis=0)
        dh = dh * params["gamma"]
    dx = (dh - xhat * np.mean(dh * xhat, axis=1, keepdims=True)) / rho
    return dx, grads


def init_std(d_in: int, d_out: int) -> float:
    return min(np.sqrt(d_out / d_in), 1.0) / np.sqrt(d_in)


def init_params(layers, seed: int) -> list[dict]:
    """Gaussian init with std ``min(sqrt(d_out/d_in), 1) / sqrt(d_in)``; gains start at one."""
    gen = Xoshiro256(derive_seed(seed, 0x1A7E))
    params = []
    for layer in layers:
        p = {}
        for name in layer.weight_names:
            p[name] = gen.normals((layer.d_out, layer.d_in), init_std(layer.d_in, layer.d_out))
        if layer.pre_norm == "learnable_rms":
            p["gamma"] = np.ones(layer.d_in)
        params.append(p)
    return params


def mlp_forward(layers, params, x):
    caches = []
    for layer, p in zip(layers, params):
        x, cache = forward(layer, p, x)
        caches.append(cache)
    return x, caches


def mlp_backward(layers, params, caches, dy):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        dy, grads[i] = backward(layers[i], params[i], caches[i], dy)
    return dy, grads


# ---------------------------------------------------------------- tasks


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "frobenius_nearest_point"
    d_in: int = 8
    d_out: int = 8
    n_samples: int = 512
    n_eval: int = 256
    batch_size: int = 32
    seed: int = 0
    noise: float = 0.0
    n_classes: int = 8
    separation: float = 3.0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.batch_size < 1 or self.n_samples < 1:
            raise ValueError("batch_size and n_samples must be positive")


@dataclass
class Dataset:
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    x_eval: Optional[np.ndarray] = None
    y_eval: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def make_dataset(task: TaskSpec) -> Dataset:
    gen = Xoshiro256(derive_seed(task.seed, 0xDA7A))
    if task.kind == "frobenius_nearest_point":
        return Dataset(target=gen.normals((task.d_out, task.d_in)))
    n = task.n_samples + task.n_eval
    if task.kind == "linear_regression":
        teacher = gen.normals((task.d_out, task.d_in), 1.0 / np.sqrt(task.d_in))
        x = gen.normals((n, task.d_in))
        y = x @ teacher.T
        if task.noise:
            y = y + gen.normals(y.shape, task.noise)
        ds = Dataset(extra={"teacher": teacher})
    else:
        means = gen.normals((task.n_classes, task.d_in), task.separation / np.sqrt(task.d_in))
        labels = np.array([gen.integers(task.n_classes) for _ in range(n)])
        x = means[labels] + gen.normals((n, task.d_in))
        y = labels
        ds = Dataset(extra={"means": means})
    ds.x, ds.y = x[: task.n_samples], y[: task.n_samples]
    ds.x_eval, ds.y_eval = x[task.n_samples :], y[task.n_samples :]
    return ds


def batch_at(task: TaskSpec, data: Dataset, step: int):
    """Contiguous (wrapping) minibatch whose start index derives from ``(seed, step)``."""
    if data.target is not None:
        return None, None
    start = derive_seed(task.seed, 0xBA7C, step) % task.n_samples
    idx = (start + np.arange(task.batch_size)) % task.n_samples
    return data.x[idx], data.y[idx]


def _head_loss(task: TaskSpec, out: np.ndarray, y: np.ndarray):
    if task.kind == "linear_regression":
        diff = out - y
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    shifted = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    b = out.shape[0]
    loss = -float(np.mean(logp[np.arange(b), y]))
    d = np.exp(logp)
    d[np.arange(b), y] -= 1.0
    return loss, d / b


def loss_and_grad(task: TaskSpec, layers, params, data: Dataset, x=None, y=None):
    """Loss and per-layer gradient dicts on ``(x, y)`` (or on the target for nearest-point)."""
    if task.kind == "frobenius_nearest_point":
        diff = params[0]["w"] - data.target
        return float(np.sum(diff * diff)), [{"w": 2.0 * diff}]
    with np.errstate(over="ignore", invalid="ignore"):
        out, caches = mlp_forward(layers, params, x)
        loss, dout = _head_loss(task, out, y)
        if not np.isfinite(loss):
            return loss, None
        _, grads = mlp_backward(layers, params, caches, dout)
    return loss, grads


def eval_loss(task: TaskSpec, layers, params, data: Dataset) -> float:
    if task.kind == "frobenius_nearest_point":
        return loss_and_grad(task, layers, params, data)[0]
    with np.errstate(over="ignore", invalid="ignore"):
        out, _ = mlp_forward(layers, params, data.x_eval)
        return _head_loss(task, out, data.y_eval)[0]


def bayes_loss(task: TaskSpec, data: Dataset) -> float:
    """Cross-entropy of the Bayes posterior on the eval split (classification only).

    Classes are equiprobable Gaussian clusters with identity covariance, so the
    posterior is a softmax of ``-||x - mu_k||^2 / 2``; no model can do better in
    expectation, which makes this the loss floor for the task.
    """
    if task.kind != "synthetic_classification":
        raise ValueError("the Bayes floor is defined for synthetic_classification only")
    means = data.extra["means"]
    d2 = np.sum((data.x_eval[:, None, :] - means[None, :, :]) ** 2, axis=2)
    return _head_loss(task, -0.5 * d2, data.y_eval)[0]
