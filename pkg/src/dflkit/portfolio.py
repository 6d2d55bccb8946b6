"""Kelly-criterion portfolio problem: log-growth over the probability simplex.

Decisions live on the simplex over a bank asset (index 0, fixed net rate beta)
and k securities with uncertain net returns.  The maximization is negated so
the objective follows the package-wide minimization convention.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    CONTINUOUS_TOL,
    ContextDataset,
    DecisionVector,
    FeasibilityError,
    NumericError,
    ProblemHandle,
    substream,
)

RETURN_LOW = -1.0 + 1e-6
RETURN_HIGH = 1.7


def project_simplex(xi: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("cannot project non-finite point")
    n = len(xi)
    u = np.sort(xi)[::-1]
    css = np.cumsum(u)
    rho = np.flatnonzero(u - (css - 1.0) / np.arange(1, n + 1) > 0)[-1]
    tau = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(xi - tau, 0.0)


@dataclass
class PortfolioProblem(ProblemHandle):
    """k securities plus a bank asset; objective is negated expected log growth."""

    k: int
    beta: float
    p: int = 5

    problem_id = "portfolio"

    def __post_init__(self):
        if self.beta <= -1:
            raise ValueError("bank net rate must exceed -1")

    def dims(self) -> tuple[int, int, int]:
        return self.p, self.k, self.k + 1

    def is_feasible(self, x: DecisionVector) -> bool:
        v = x.values
        if v.shape != (self.k + 1,):
            return False
        return bool(v.min() >= -CONTINUOUS_TOL and abs(v.sum() - 1.0) <= CONTINUOUS_TOL)

    def _rates(self, scenarios: np.ndarray) -> np.ndarray:
        return np.hstack([np.full((len(scenarios), 1), self.beta), scenarios])

    def objective(self, c: np.ndarray, x: DecisionVector) -> float:
        c = np.asarray(c, dtype=float)
        if c.shape != (self.k,):
            raise ValueError(f"returns vector has shape {c.shape}, expected ({self.k},)")
        self.check_decision(x)
        growth = 1.0 + self.beta * x.values[0] + c @ x.values[1:]
        if growth <= 0:
            raise NumericError(f"log argument {growth} <= 0")
        return -float(np.log(growth))

    def solve_deterministic(self, c_hat: np.ndarray) -> DecisionVector:
        c_hat = np.asarray(c_hat, dtype=float)
        rates = np.concatenate([[self.beta], c_hat])
        x = np.zeros(self.k + 1)
        x[int(np.argmax(rates))] = 1.0  # ties resolve to the lowest index (bank first)
        return DecisionVector(x, self.problem_id)

    def solve_scenarios(self, scenarios: Sequence[np.ndarray]) -> DecisionVector:
        """Maximize the scenario-average log growth by projected gradient ascent.

        The problem is concave over the simplex, so the stationary point of the
        projected-gradient map is the global optimum.
        """
        rates = self._rates(np.atleast_2d(np.asarray(scenarios, dtype=float)))

        def value(x):
            growth = 1.0 + rates @ x
            if growth.min() <= 0:
                return -np.inf
            return float(np.mean(np.log(growth)))

        x = np.full(self.k + 1, 1.0 / (self.k + 1))
        if value(x) == -np.inf:
            x = np.zeros(self.k + 1)
            x[0] = 1.0  # all-bank keeps every scenario's growth positive
        fx = value(x)
        step = 1.0
        converged = False
        for _ in range(10_000):
            growth = 1.0 + rates @ x
            grad = rates.T @ (1.0 / growth) / len(rates)
            moved = False
            while step > 1e-18:
                cand = project_simplex(x + step * grad)
                fc = value(cand)
                delta = cand - x
                if fc > -np.inf and fc >= fx + 1e-4 * float(grad @ delta):
                    gap = float(np.linalg.norm(delta)) / step
                    x, fx = cand, fc
                    moved = True
                    break
                step *= 0.5
            if not moved:
                converged = True  # no admissible ascent step left: stationary
                break
            if gap < 1e-8:
                converged = True
                break
            step = min(step * 1.5, 1e6)
        if not converged:
            warnings.warn("portfolio scenario solve returned before full convergence")
        return DecisionVector(x, self.problem_id)

    def solve_quadratic(self, xi: np.ndarray) -> DecisionVector:
        return DecisionVector(project_simplex(xi), self.problem_id)


@dataclass
class ReturnsDataset:
    """Context dataset of security returns plus the bank rate implied by training data."""

    data: ContextDataset
    beta: float


def bank_rate(train_returns: np.ndarray) -> float:
    """Median over training instances of each instance's 4th-highest security return."""
    train_returns = np.atleast_2d(train_returns)
    idx = min(3, train_returns.shape[1] - 1)
    fourth = np.sort(train_returns, axis=1)[:, ::-1][:, idx]
    return float(np.median(fourth))


def generate_returns(
    k: int,
    p: int,
    sizes: tuple[int, int, int],
    seed: int,
    scale: float = 1.0,
    noise_std: float = 0.5,
) -> ReturnsDataset:
    """Synthetic factor-driven returns spanning (RETURN_LOW, RETURN_HIGH].

    z ~ N(0, I_p); per security, c = clip(tanh(scale * Bz + noise) * 1.35 + 0.35).
    """
    if k < 2:
        raise ValueError("need at least two securities")
    rng = substream(seed, "portfolio-data")
    n = sum(sizes)
    z = rng.standard_normal((n, p))
    b = rng.standard_normal((k, p)) / np.sqrt(p)
    noise = rng.standard_normal((n, k)) * noise_std
    c = np.tanh(scale * z @ b.T + noise) * 1.35 + 0.35
    c = np.clip(c, RETURN_LOW, RETURN_HIGH)
    splits = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    data = ContextDataset(z, c, splits, seed)
    return ReturnsDataset(data, bank_rate(data.split("train")[1]))


def load_returns_csv(path, window: int = 10, split_fracs=(0.7, 0.15, 0.15), seed: int = 0) -> ReturnsDataset:
    """Load net returns from CSV (header r_1,...,r_k; one row per time step).

    Features are trailing windows of the previous `window` return vectors,
    flattened, so the first `window` rows seed features only.  Splits are
    assigned chronologically by `split_fracs`.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty CSV")
        expected = [f"r_{i + 1}" for i in range(len(header))]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        k = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != k:
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields, expected {k}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from exc
    returns = np.clip(np.array(rows), RETURN_LOW, RETURN_HIGH)
    if len(returns) <= window:
        raise ValueError(f"{path}: need more than {window} rows")
    feats = np.array([returns[t - window : t].ravel() for t in range(window, len(returns))])
    params = returns[window:]
    n = len(params)
    n_train = int(round(split_fracs[0] * n))
    n_val = int(round(split_fracs[1] * n))
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    data = ContextDataset(feats, params, splits, seed)
    return ReturnsDataset(data, bank_rate(data.split("train")[1]))
