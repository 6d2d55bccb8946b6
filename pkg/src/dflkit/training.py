"""Prediction-focused (MSE) and decision-focused (score-function) training.

The decision-focused loop samples proxy inputs from a diagonal Gaussian whose
mean comes from the MLP and whose per-dimension scales are free parameters,
then pushes REINFORCE-style gradients through the (black-box) proxy solver.
"""
from __future__ import annotations

import copy
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    DETERMINISTIC,
    QUADRATIC,
    SCENARIO,
    ContextDataset,
    DecisionVector,
    NumericError,
    ProblemHandle,
    ProxyConfig,
    in_data_optima,
    mean_absolute_regret,
    proxy_solve,
    substream,
)
from .nn import (
    IDENTITY,
    MEAN_SHIFT,
    QUANTILE_SHIFT,
    AdamState,
    MLPParams,
    Standardizer,
    adam_step,
    backward,
    checkpoint_from_json,
    checkpoint_to_json,
    clip_global_norm,
    fit_standardizer,
    forward,
    init_mlp,
)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 250
    samples_per_point: int = 1
    baseline_subtraction: bool = True
    seed: int = 0
    sigma_floor: float = 1e-3
    clip_norm: float = 10.0
    hidden: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.samples_per_point < 1:
            raise ValueError("need at least one sample per point")


@dataclass
class GaussianPredictor:
    """MLP mean plus feature-independent learnable log-scales over proxy inputs."""

    mlp: MLPParams
    log_sigma: np.ndarray
    sigma_floor: float
    standardizer: Standardizer
    proxy: ProxyConfig

    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def clamp_sigma(self) -> None:
        np.maximum(self.log_sigma, np.log(self.sigma_floor), out=self.log_sigma)

    def predict_mean(self, z: np.ndarray) -> np.ndarray:
        """Destandardized prediction(s) in raw proxy-input space."""
        y, _ = forward(self.mlp, self.standardizer.transform_input(z))
        return self.standardizer.destandardize_output(y)

    def policy(self, problem: ProblemHandle) -> Callable[[np.ndarray], DecisionVector]:
        """Deterministic inference policy: proxy-solve at the mean prediction."""

        def act(z: np.ndarray) -> DecisionVector:
            return proxy_solve(problem, self.proxy, self.predict_mean(z))

        return act

    def copy(self) -> "GaussianPredictor":
        return GaussianPredictor(
            self.mlp.copy(),
            self.log_sigma.copy(),
            self.sigma_floor,
            copy.deepcopy(self.standardizer),
            self.proxy,
        )

    def to_json(self) -> str:
        return checkpoint_to_json(
            self.mlp,
            self.standardizer,
            extra={
                "log_sigma": self.log_sigma.tolist(),
                "sigma_floor": self.sigma_floor,
                "proxy_kind": self.proxy.kind,
                "proxy_n": self.proxy.n_scenarios,
            },
        )

    @classmethod
    def from_json(cls, text: str) -> "GaussianPredictor":
        mlp, std, extra = checkpoint_from_json(text)
        return cls(
            mlp,
            np.array(extra["log_sigma"]),
            extra["sigma_floor"],
            std,
            ProxyConfig(extra["proxy_kind"], extra["proxy_n"]),
        )


@dataclass
class CheckpointRecord:
    epoch: int
    validation_mean_regret: float
    model: GaussianPredictor


def standardizer_for(
    problem: ProblemHandle,
    proxy: ProxyConfig,
    train_z: np.ndarray,
    train_c: np.ndarray,
    train_decisions: np.ndarray | None = None,
) -> Standardizer:
    """Output standardization per proxy: mean shift by default, training
    quantiles for multi-scenario blocks, in-data optimal decisions for the
    quadratic proxy, and raw outputs for the portfolio scenario proxy (pushing
    its blocks together collapses the scenarios)."""
    if proxy.kind == QUADRATIC:
        if train_decisions is None:
            train_decisions = np.array(
                [problem.solve_deterministic(c).values for c in train_c]
            )
        return fit_standardizer(train_z, train_decisions, MEAN_SHIFT)
    if proxy.kind == SCENARIO and proxy.n_scenarios >= 2:
        if problem.problem_id == "portfolio":
            return fit_standardizer(train_z, train_c, IDENTITY, n_blocks=proxy.n_scenarios)
        return fit_standardizer(train_z, train_c, QUANTILE_SHIFT, n_blocks=proxy.n_scenarios)
    # the deterministic proxy and its n=1 scenario alias share one setup
    return fit_standardizer(train_z, train_c, MEAN_SHIFT)


def sigma_init_targets(
    proxy: ProxyConfig, train_c: np.ndarray, train_decisions: np.ndarray | None = None
) -> np.ndarray:
    """Per-dimension standard deviation of the prediction targets."""
    if proxy.kind == QUADRATIC:
        if train_decisions is None:
            raise ValueError("quadratic proxy needs in-data optimal decisions")
        return np.atleast_2d(train_decisions).std(axis=0)
    std = np.atleast_2d(train_c).std(axis=0)
    if proxy.kind == SCENARIO:
        return np.tile(std, proxy.n_scenarios)
    return std


def init_predictor(
    problem: ProblemHandle,
    proxy: ProxyConfig,
    dataset: ContextDataset,
    config: TrainConfig,
    train_decisions: np.ndarray | None = None,
) -> GaussianPredictor:
    train_z, train_c = dataset.split("train")
    _, d_c, d_x = problem.dims()
    out_dim = proxy.prediction_dim(d_c, d_x)
    if proxy.kind == QUADRATIC and train_decisions is None:
        train_decisions = np.array([problem.solve_deterministic(c).values for c in train_c])
    std = standardizer_for(problem, proxy, train_z, train_c, train_decisions)
    mlp = init_mlp([dataset.p, *config.hidden, out_dim], substream(config.seed, "init"))
    sig = sigma_init_targets(proxy, train_c, train_decisions)
    sig = np.maximum(sig, config.sigma_floor)
    return GaussianPredictor(mlp, np.log(sig), config.sigma_floor, std, proxy)


def _sfge_batch(
    problem: ProblemHandle,
    predictor: GaussianPredictor,
    z_batch: np.ndarray,
    c_batch: np.ndarray,
    rng: np.random.Generator,
    samples_per_point: int,
    baseline_subtraction: bool,
    baseline_override: float | None = None,
):
    """One REINFORCE mini-batch: mean loss plus gradients for MLP and log-sigma."""
    std = predictor.standardizer
    y, cache = forward(predictor.mlp, std.transform_input(z_batch))
    mu = std.destandardize_output(y)
    sigma = predictor.sigma()
    n_b = len(z_batch)
    n_s = samples_per_point

    losses = np.empty((n_s, n_b))
    devs = np.empty((n_s, n_b, mu.shape[1]))
    for s in range(n_s):
        eps = rng.standard_normal(mu.shape)
        devs[s] = sigma * eps
        for b in range(n_b):
            x = proxy_solve(problem, predictor.proxy, mu[b] + devs[s, b])
            losses[s, b] = problem.objective(c_batch[b], x)
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite loss from proxy solve")

    if baseline_override is not None:
        base = baseline_override
    elif baseline_subtraction:
        base = float(losses.mean())
    else:
        base = 0.0
    w = (losses - base) / (n_b * n_s)

    score_mu = devs / sigma ** 2  # d log p / d mu
    g_y = np.einsum("sb,sbo->bo", w, score_mu) * std.scale_flat
    gw, gb = backward(predictor.mlp, cache, g_y)
    g_log_sigma = np.einsum("sb,sbo->o", w, devs ** 2 / sigma ** 2 - 1.0)
    return float(losses.mean()), gw, gb, g_log_sigma


def sfge_gradient(
    problem: ProblemHandle,
    proxy: ProxyConfig,
    predictor: GaussianPredictor,
    z: np.ndarray,
    c_true: np.ndarray,
    rng: np.random.Generator,
    baseline: float = 0.0,
):
    """Single-point score-function gradient estimate with an explicit baseline.

    Returns (sampled loss, (weight grads, bias grads, log-sigma grad)).
    """
    if proxy != predictor.proxy:
        raise ValueError("proxy configuration does not match the predictor")
    loss, gw, gb, gs = _sfge_batch(
        problem,
        predictor,
        np.atleast_2d(z),
        np.atleast_2d(c_true),
        rng,
        samples_per_point=1,
        baseline_subtraction=False,
        baseline_override=baseline,
    )
    return loss, (gw, gb, gs)


def _validation_regret(problem, predictor, val_split, opt_objectives) -> float:
    policy = predictor.policy(problem)
    report = mean_absolute_regret(
        problem, list(zip(*val_split)), policy, opt_objectives=opt_objectives
    )
    return report.mean_absolute_regret


def train_dfl(
    problem: ProblemHandle,
    dataset: ContextDataset,
    proxy: ProxyConfig,
    config: TrainConfig,
    train_decisions: np.ndarray | None = None,
    validation_curve: list | None = None,
    train_log: list | None = None,
) -> CheckpointRecord:
    """Score-function training; returns the checkpoint with the best
    validation mean absolute regret (evaluated at the mean prediction)."""
    train_z, train_c = dataset.split("train")
    val_split = dataset.split("val")
    if proxy.kind == QUADRATIC and train_decisions is None:
        train_decisions = np.array([problem.solve_deterministic(c).values for c in train_c])
    predictor = init_predictor(problem, proxy, dataset, config, train_decisions)
    if config.epochs == 0:
        val = _validation_regret(problem, predictor, val_split, None) if len(val_split[0]) else float("nan")
        return CheckpointRecord(0, val, predictor)

    val_opt = in_data_optima(problem, val_split[1])
    rng = substream(config.seed, "sfge")
    params = predictor.mlp.flat() + [predictor.log_sigma]
    state = AdamState.for_params(params, lr=config.lr)
    best: CheckpointRecord | None = None
    n = len(train_z)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                loss, gw, gb, gs = _sfge_batch(
                    problem,
                    predictor,
                    train_z[idx],
                    train_c[idx],
                    rng,
                    config.samples_per_point,
                    config.baseline_subtraction,
                )
                grads = gw + gb + [gs]
                clip_global_norm(grads, config.clip_norm)
                adam_step(params, state, grads)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            predictor.clamp_sigma()
            epoch_loss += loss * len(idx)
        val = _validation_regret(problem, predictor, val_split, val_opt)
        if validation_curve is not None:
            validation_curve.append(val)
        if train_log is not None:
            train_log.append(
                {
                    "epoch": epoch,
                    "split": "val",
                    "mean_absolute_regret": val,
                    "sigma_mean": float(predictor.sigma().mean()),
                    "wall_time_s": time.perf_counter() - t0,
                }
            )
        if best is None or val < best.validation_mean_regret:
            best = CheckpointRecord(epoch, val, predictor.copy())
    return best


def train_pfl(
    problem: ProblemHandle,
    dataset: ContextDataset,
    config: TrainConfig,
    validation_curve: list | None = None,
    train_log: list | None = None,
) -> GaussianPredictor:
    """Mean-squared-error training of the deterministic-proxy predictor;
    returns the best-validation-MSE model (sigma is left at its floor, unused)."""
    proxy = ProxyConfig(DETERMINISTIC)
    train_z, train_c = dataset.split("train")
    val_z, val_c = dataset.split("val")
    predictor = init_predictor(problem, proxy, dataset, config)
    predictor.log_sigma[:] = np.log(config.sigma_floor)
    if config.epochs == 0:
        return predictor

    rng = substream(config.seed, "pfl")
    params = predictor.mlp.flat()
    state = AdamState.for_params(params, lr=config.lr)
    best_mse = np.inf
    best_model = predictor.copy()
    n = len(train_z)
    std = predictor.standardizer
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            y, cache = forward(predictor.mlp, std.transform_input(train_z[idx]))
            mu = std.destandardize_output(y)
            resid = mu - train_c[idx]
            if not np.all(np.isfinite(resid)):
                raise NumericError(f"epoch {epoch}: non-finite PFL loss")
            g_y = 2.0 * resid * std.scale_flat / len(idx)
            gw, gb = backward(predictor.mlp, cache, g_y)
            grads = gw + gb
            clip_global_norm(grads, config.clip_norm)
            adam_step(params, state, grads)
        val_mu = predictor.predict_mean(val_z)
        val_mse = float(((val_mu - val_c) ** 2).sum(axis=1).mean())
        if validation_curve is not None:
            validation_curve.append(val_mse)
        if train_log is not None:
            train_log.append(
                {
                    "epoch": epoch,
                    "split": "val_mse",
                    "mean_absolute_regret": val_mse,
                    "sigma_mean": float(predictor.sigma().mean()),
                    "wall_time_s": time.perf_counter() - t0,
                }
            )
        if val_mse < best_mse:
            best_mse = val_mse
            best_model = predictor.copy()
    return best_model


def residual_saa_policy(
    problem: ProblemHandle,
    pfl_model: GaussianPredictor,
    validation_split: tuple[np.ndarray, np.ndarray],
    n: int = 16,
    seed: int = 0,
) -> Callable[[np.ndarray], DecisionVector]:
    """Sample-average inference around PFL predictions using validation residuals.

    At each query the policy adds n residuals drawn with replacement (seeded
    per input, so a given feature vector always maps to the same decision) and
    solves the scenario proxy.
    """
    if n < 1:
        raise ValueError("need n >= 1 scenarios")
    val_z, val_c = validation_split
    if len(val_z) == 0:
        raise ValueError("validation split is empty")
    residuals = val_c - pfl_model.predict_mean(val_z)

    def act(z: np.ndarray) -> DecisionVector:
        z = np.asarray(z, dtype=float)
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, zlib.crc32(z.tobytes())])
        )
        pick = rng.integers(0, len(residuals), size=n)
        mu = pfl_model.predict_mean(z)
        return problem.solve_scenarios([mu + residuals[j] for j in pick])

    return act
