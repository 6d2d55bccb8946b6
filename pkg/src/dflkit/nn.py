"""Small multilayer perceptron with manual backpropagation, Adam, and
input/output standardization.  No autodiff framework: gradients are chained
by hand and checked against finite differences in the tests.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import NumericError


@dataclass
class MLPParams:
    """Affine layers with LeakyReLU between them; the last layer is linear."""

    weights: list[np.ndarray]  # layer l maps (in, out): h = a @ W + b
    biases: list[np.ndarray]
    alpha: float = 0.01

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.alpha)

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_mlp(layer_sizes: list[int], rng: np.random.Generator, alpha: float = 0.01) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases, alpha)


def forward(params: MLPParams, z: np.ndarray) -> tuple[np.ndarray, list]:
    """Batched forward pass.  Accepts (p,) or (B, p); output matches.

    The cache holds each layer's input and pre-activation, enough for backward.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    a = np.atleast_2d(z)
    if a.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dim {a.shape[1]} does not match first layer {params.weights[0].shape[0]}"
        )
    cache = []
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = a @ w + b
        cache.append((a, h))
        a = h if l == last else np.where(h > 0, h, params.alpha * h)
    return (a[0] if single else a), cache


def backward(params: MLPParams, cache: list, output_grad: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of sum(output_grad * output) w.r.t. every weight and bias."""
    g = np.atleast_2d(np.asarray(output_grad, dtype=float))
    if len(cache) != len(params.weights):
        raise ValueError("cache does not match the network depth")
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    delta = g
    for l in range(len(params.weights) - 1, -1, -1):
        a_in, h = cache[l]
        if delta.shape != h.shape:
            raise ValueError("output gradient shape does not match the cached batch")
        grad_w[l] = a_in.T @ delta
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            _, h_prev = cache[l - 1]
            delta = (delta @ params.weights[l].T) * np.where(h_prev > 0, 1.0, params.alpha)
    return grad_w, grad_b


@dataclass
class AdamState:
    """First/second moment accumulators for a flat list of parameter arrays."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 5e-4) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            lr=lr,
        )


def adam_step(params: list[np.ndarray], state: AdamState, grads: list[np.ndarray]) -> None:
    """Standard bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in Adam step")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v, g in zip(params, state.first_moment, state.second_moment, grads):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the joint norm is at most max_norm; returns the norm."""
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads)))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


MEAN_SHIFT = "mean-shift"
QUANTILE_SHIFT = "quantile-shift"
IDENTITY = "identity"


@dataclass
class Standardizer:
    """Input whitening plus block-wise output shift/scale.

    The network learns in standardized space; predictions are mapped back as
    raw = net_output * output_scale + output_shift, block by block (scenario
    predictors emit n blocks, each shifted to a different training quantile).
    """

    input_mean: np.ndarray
    input_std: np.ndarray
    output_shift: np.ndarray  # (n_blocks, base_dim)
    output_scale: np.ndarray  # (base_dim,)
    mode: str = MEAN_SHIFT

    def __post_init__(self):
        self.input_mean = np.asarray(self.input_mean, dtype=float)
        self.input_std = np.asarray(self.input_std, dtype=float)
        self.output_shift = np.atleast_2d(np.asarray(self.output_shift, dtype=float))
        self.output_scale = np.asarray(self.output_scale, dtype=float)
        if self.mode not in (MEAN_SHIFT, QUANTILE_SHIFT, IDENTITY):
            raise ValueError(f"unknown standardizer mode {self.mode!r}")
        if np.any(self.input_std <= 0) or np.any(self.output_scale <= 0):
            raise ValueError("standardizer scales must be positive")

    @property
    def n_blocks(self) -> int:
        return self.output_shift.shape[0]

    @property
    def base_dim(self) -> int:
        return self.output_shift.shape[1]

    @property
    def scale_flat(self) -> np.ndarray:
        """Per-output-coordinate scale, tiled across blocks (the chain-rule factor)."""
        return np.tile(self.output_scale, self.n_blocks)

    @property
    def shift_flat(self) -> np.ndarray:
        return self.output_shift.ravel()

    def transform_input(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.input_mean) / self.input_std

    def standardize_output(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.shift_flat) / self.scale_flat

    def destandardize_output(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.scale_flat + self.shift_flat

    def to_dict(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "output_shift": self.output_shift.tolist(),
            "output_scale": self.output_scale.tolist(),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            np.array(d["input_mean"]),
            np.array(d["input_std"]),
            np.array(d["output_shift"]),
            np.array(d["output_scale"]),
            d["mode"],
        )


def _safe_std(values: np.ndarray) -> np.ndarray:
    std = values.std(axis=0)
    return np.where(std > 0, std, 1.0)


def fit_standardizer(
    train_features: np.ndarray,
    train_targets: np.ndarray,
    mode: str = MEAN_SHIFT,
    n_blocks: int = 1,
) -> Standardizer:
    """Fit on the training split only.

    mean-shift: one block shifted by the target mean.  quantile-shift: block i
    of n is shifted to the in-data quantile i/(n+1) (index floor(m*q) of the
    per-dimension sort).  identity: raw network outputs pass through.
    """
    feats = np.atleast_2d(np.asarray(train_features, dtype=float))
    targets = np.atleast_2d(np.asarray(train_targets, dtype=float))
    mean_in = feats.mean(axis=0)
    std_in = _safe_std(feats)
    base = targets.shape[1]
    if mode == IDENTITY:
        shift = np.zeros((n_blocks, base))
        scale = np.ones(base)
    elif mode == MEAN_SHIFT:
        if n_blocks != 1:
            raise ValueError("mean-shift uses a single output block")
        shift = targets.mean(axis=0, keepdims=True)
        scale = _safe_std(targets)
    elif mode == QUANTILE_SHIFT:
        m = len(targets)
        srt = np.sort(targets, axis=0)
        rows = []
        for i in range(1, n_blocks + 1):
            idx = min(int(np.floor(m * i / (n_blocks + 1))), m - 1)
            rows.append(srt[idx])
        shift = np.array(rows)
        scale = _safe_std(targets)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Standardizer(mean_in, std_in, shift, scale, mode)


def checkpoint_to_json(params: MLPParams, standardizer: Standardizer, extra: dict | None = None) -> str:
    payload = {
        "layer_sizes": params.layer_sizes,
        "alpha": params.alpha,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "standardizer": standardizer.to_dict(),
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload)


def checkpoint_from_json(text: str) -> tuple[MLPParams, Standardizer, dict]:
    payload = json.loads(text)
    params = MLPParams(
        [np.array(w) for w in payload["weights"]],
        [np.array(b) for b in payload["biases"]],
        payload["alpha"],
    )
    std = Standardizer.from_dict(payload["standardizer"])
    extra = {k: v for k, v in payload.items() if k not in ("layer_sizes", "alpha", "weights", "biases", "standardizer")}
    return params, std, extra
