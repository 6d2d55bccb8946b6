"""Shared domain types: context datasets, decisions, the problem interface, regret metrics."""
from __future__ import annotations

import json
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

INTEGRALITY_TOL = 1e-9
CONTINUOUS_TOL = 1e-6

SPLITS = ("train", "val", "test")

DETERMINISTIC = "deterministic"
SCENARIO = "scenario"
QUADRATIC = "quadratic"


class FeasibilityError(ValueError):
    """A decision violates the owning problem's feasible set."""


class NumericError(RuntimeError):
    """Non-finite values surfaced during optimization or training."""


class GenerationError(RuntimeError):
    """Random instance generation exhausted its retry budget."""


class CapacityError(RuntimeError):
    """Problem size exceeds what an exact solver can handle."""


def substream(seed: int, *labels: str) -> np.random.Generator:
    """Derive an independent, reproducible RNG from a master seed and purpose labels.

    All randomness in the package flows through named substreams so that
    policies compared under the same master seed share data exactly.
    """
    entropy = [int(seed)] + [zlib.crc32(lab.encode("utf-8")) for lab in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class DecisionVector:
    """A feasible first-stage decision in a problem-specific flat real encoding."""

    values: np.ndarray
    problem_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


@dataclass(frozen=True)
class ProxyConfig:
    """Which decision proxy a predictor feeds: deterministic, scenario-based, or quadratic."""

    kind: str
    n_scenarios: int = 1

    def __post_init__(self):
        if self.kind not in (DETERMINISTIC, SCENARIO, QUADRATIC):
            raise ValueError(f"unknown proxy kind: {self.kind!r}")
        if self.kind == SCENARIO and self.n_scenarios < 1:
            raise ValueError("scenario proxy needs n >= 1")

    def prediction_dim(self, d_c: int, d_x: int) -> int:
        """Output dimension the predictive model must produce for this proxy."""
        if self.kind == DETERMINISTIC:
            return d_c
        if self.kind == SCENARIO:
            return self.n_scenarios * d_c
        return d_x

    @property
    def label(self) -> str:
        if self.kind == SCENARIO:
            return f"scenario{self.n_scenarios}"
        return self.kind


class ProblemHandle(ABC):
    """A problem's feasible set, objective, and proxy solvers behind one interface.

    Implementations are stateless after construction (beyond internal caches of
    pure functions) and safe to invoke from concurrent workers.  All objectives
    follow the minimization convention; maximization problems negate at the
    boundary.
    """

    problem_id: str = "problem"

    @abstractmethod
    def objective(self, c: np.ndarray, x: DecisionVector) -> float:
        """Total realized cost of decision x under realized parameters c."""

    @abstractmethod
    def solve_deterministic(self, c_hat: np.ndarray) -> DecisionVector:
        """Optimal decision if the predicted parameters were certain."""

    @abstractmethod
    def solve_scenarios(self, scenarios: Sequence[np.ndarray]) -> DecisionVector:
        """Decision minimizing the average cost over the predicted scenarios."""

    @abstractmethod
    def solve_quadratic(self, xi: np.ndarray) -> DecisionVector:
        """Euclidean projection of a point onto the feasible decision set."""

    @abstractmethod
    def is_feasible(self, x: DecisionVector) -> bool:
        ...

    @abstractmethod
    def dims(self) -> tuple[int, int, int]:
        """(feature dim p, parameter dim d_c, decision dim d_x)."""

    def check_decision(self, x: DecisionVector) -> None:
        if not self.is_feasible(x):
            raise FeasibilityError(f"{self.problem_id}: infeasible decision {x.values}")


@dataclass
class ContextDataset:
    """Paired (features z, realized parameters c) records with train/val/test splits."""

    features: np.ndarray
    params: np.ndarray
    splits: list[str]
    seed: int

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        if len(self.features) != len(self.params) or len(self.features) != len(self.splits):
            raise ValueError("features, params and splits must have equal length")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split labels: {bad}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def d_c(self) -> int:
        return self.params.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Feature and parameter arrays for one split, in dataset order."""
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        mask = np.array([s == name for s in self.splits])
        return self.features[mask], self.params[mask]

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "p": self.p,
            "d_c": self.d_c,
            "instances": [
                {"z": z.tolist(), "c": c.tolist(), "split": s}
                for z, c, s in zip(self.features, self.params, self.splits)
            ],
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ContextDataset":
        payload = json.loads(text)
        inst = payload["instances"]
        ds = cls(
            features=np.array([r["z"] for r in inst], dtype=float),
            params=np.array([r["c"] for r in inst], dtype=float),
            splits=[r["split"] for r in inst],
            seed=int(payload["seed"]),
        )
        if ds.p != payload["p"] or ds.d_c != payload["d_c"]:
            raise ValueError("dataset header dims disagree with instance records")
        return ds

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ContextDataset":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class RegretReport:
    """Per-instance absolute regrets with aggregate and optional normalization."""

    per_instance_regret: np.ndarray
    mean_absolute_regret: float
    normalization_base: float | None
    normalized_mean: float | None
    seed: int


def proxy_solve(problem: ProblemHandle, proxy: ProxyConfig, prediction: np.ndarray) -> DecisionVector:
    """Map a flat prediction vector through the configured decision proxy."""
    prediction = np.asarray(prediction, dtype=float)
    _, d_c, d_x = problem.dims()
    expect = proxy.prediction_dim(d_c, d_x)
    if prediction.shape != (expect,):
        raise ValueError(
            f"prediction shape {prediction.shape} does not match proxy dim {expect}"
        )
    if proxy.kind == DETERMINISTIC:
        return problem.solve_deterministic(prediction)
    if proxy.kind == SCENARIO:
        return problem.solve_scenarios(list(prediction.reshape(proxy.n_scenarios, d_c)))
    return problem.solve_quadratic(prediction)


def regret(problem: ProblemHandle, c: np.ndarray, x: DecisionVector) -> float:
    """Realized cost of x minus realized cost of the hindsight-optimal decision."""
    c = np.asarray(c, dtype=float)
    _, d_c, _ = problem.dims()
    if c.shape != (d_c,):
        raise ValueError(f"parameter vector has shape {c.shape}, expected ({d_c},)")
    problem.check_decision(x)
    best = problem.solve_deterministic(c)
    return problem.objective(c, x) - problem.objective(c, best)


def mean_absolute_regret(
    problem: ProblemHandle,
    instances: Sequence[tuple[np.ndarray, np.ndarray]],
    policy: Callable[[np.ndarray], DecisionVector],
    *,
    normalization_base: float | None = None,
    opt_objectives: Sequence[float] | None = None,
    seed: int = 0,
) -> RegretReport:
    """Mean absolute regret of a policy over a (z, c) split.

    `opt_objectives` may carry precomputed in-data optimal objective values
    (one per instance) to avoid re-solving the hindsight problem.
    """
    if len(instances) == 0:
        raise ValueError("cannot evaluate regret on an empty split")
    if opt_objectives is not None and len(opt_objectives) != len(instances):
        raise ValueError("opt_objectives length must match the split")
    regrets = np.empty(len(instances))
    for i, (z, c) in enumerate(instances):
        x = policy(np.asarray(z, dtype=float))
        problem.check_decision(x)
        if opt_objectives is None:
            base = problem.objective(c, problem.solve_deterministic(c))
        else:
            base = float(opt_objectives[i])
        regrets[i] = problem.objective(c, x) - base
    mean = float(regrets.mean())
    normalized = None
    if normalization_base is not None:
        normalized = mean / normalization_base
    return RegretReport(
        per_instance_regret=regrets,
        mean_absolute_regret=mean,
        normalization_base=normalization_base,
        normalized_mean=normalized,
        seed=seed,
    )


def in_data_optima(problem: ProblemHandle, params: np.ndarray) -> np.ndarray:
    """Hindsight-optimal objective values for each parameter vector (cacheable)."""
    return np.array(
        [problem.objective(c, problem.solve_deterministic(c)) for c in params]
    )
