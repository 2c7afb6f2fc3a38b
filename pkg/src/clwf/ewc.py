"""Elastic weight consolidation: Fisher diagonals and the quadratic penalty."""

from __future__ import annotations

import warnings
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from .errors import ContractError, DegenerateInputError
from .tensor import Tensor

Estimator = Literal["variance", "mean_square"]
ESTIMATORS = ("variance", "mean_square")


@dataclass
class FisherDiagonal:
    values: dict[str, np.ndarray]
    n_samples: int
    estimator: str = "variance"

    def __post_init__(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown Fisher estimator {self.estimator!r}")
        for name, v in self.values.items():
            if np.any(v < 0):
                raise ContractError(f"Fisher values for {name!r} must be non-negative")

    def names(self) -> list[str]:
        return list(self.values)

    def flat(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.values.values()])

    def copy(self) -> FisherDiagonal:
        return FisherDiagonal({k: v.copy() for k, v in self.values.items()}, self.n_samples, self.estimator)

    @classmethod
    def zeros_like(cls, other: FisherDiagonal) -> FisherDiagonal:
        return cls({k: np.zeros_like(v) for k, v in other.values.items()}, 0, other.estimator)


@dataclass(frozen=True)
class EwcSchedule:
    """Step-decayed coefficient: ``lambda0 * decay_factor ** -(step // decay_interval)``."""

    lambda0: float = 0.001
    decay_factor: float = 10.0
    decay_interval: int = 1000

    def __post_init__(self) -> None:
        if self.lambda0 < 0 or self.decay_factor <= 0 or self.decay_interval < 1:
            raise ContractError("invalid EWC schedule")

    def at(self, step: int) -> float:
        if step < 0:
            raise ContractError("step must be >= 0")
        return self.lambda0 * self.decay_factor ** (-(step // self.decay_interval))


@dataclass
class EwcState:
    fisher_sum: FisherDiagonal
    anchor: dict[str, np.ndarray]
    schedule: EwcSchedule = field(default_factory=EwcSchedule)
    iteration_count: int = 0

    def __post_init__(self) -> None:
        if set(self.anchor) != set(self.fisher_sum.values):
            raise ContractError("EWC anchor and Fisher cover different parameters")
        for name, a in self.anchor.items():
            if a.shape != self.fisher_sum.values[name].shape:
                raise ContractError(f"EWC anchor/Fisher shape mismatch for {name!r}")


@dataclass(frozen=True)
class EwcPenalty:
    loss: float
    grads: dict[str, np.ndarray]


def estimate_fisher(
    grad_fn: Callable[[Any], Mapping[str, np.ndarray]],
    dataset: Sequence[Any],
    param_names: Iterable[str],
    estimator: Estimator = "variance",
    max_samples: int | None = None,
) -> FisherDiagonal:
    """Diagonal Fisher from per-sample gradients.

    ``grad_fn(sample)`` returns the gradient of that single sample's loss for
    (at least) every name in ``param_names``.  ``variance`` gives the
    population variance of the gradients, ``mean_square`` their second moment.
    Samples are reduced in dataset order.
    """
    if estimator not in ESTIMATORS:
        raise ContractError(f"unknown Fisher estimator {estimator!r}")
    names = list(param_names)
    n = len(dataset) if max_samples is None else min(len(dataset), max_samples)
    if n == 0:
        raise ContractError("estimate_fisher needs a non-empty dataset")
    s1: dict[str, np.ndarray] = {}
    s2: dict[str, np.ndarray] = {}
    for i in range(n):
        grads = grad_fn(dataset[i])
        for name in names:
            g = np.asarray(grads[name], dtype=np.float64)
            if name in s1:
                s1[name] += g
                s2[name] += g * g
            else:
                s1[name] = g.copy()
                s2[name] = g * g
    if estimator == "variance" and n == 1:
        warnings.warn("variance Fisher from a single sample is identically zero", RuntimeWarning, stacklevel=2)
    values = {}
    for name in names:
        second = s2[name] / n
        if estimator == "variance":
            mean = s1[name] / n
            values[name] = np.maximum(second - mean * mean, 0.0)
        else:
            values[name] = second
    return FisherDiagonal(values, n, estimator)


def accumulate_fisher(total: FisherDiagonal, new: FisherDiagonal) -> FisherDiagonal:
    if total.estimator != new.estimator:
        raise ContractError(f"cannot add {new.estimator} Fisher to {total.estimator} Fisher")
    if set(total.values) != set(new.values):
        raise ContractError("Fisher diagonals cover different parameters")
    out = {}
    for name, v in total.values.items():
        w = new.values[name]
        if v.shape != w.shape:
            raise ContractError(f"Fisher shape mismatch for {name!r}: {v.shape} vs {w.shape}")
        out[name] = v + w
    return FisherDiagonal(out, total.n_samples + new.n_samples, total.estimator)


def _array(p: np.ndarray | Tensor) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def ewc_penalty(params: Mapping[str, np.ndarray | Tensor], state: EwcState, lam: float) -> EwcPenalty:
    """``(lam/2) * sum f * (theta - anchor)**2`` and its gradient.

    Parameters outside the state (e.g. freshly added factors) are ignored.
    """
    if lam < 0:
        raise ContractError("EWC coefficient must be non-negative")
    loss = 0.0
    grads = {}
    for name, anchor in state.anchor.items():
        if name not in params:
            raise ContractError(f"parameter {name!r} missing for EWC penalty")
        theta = _array(params[name])
        if theta.shape != anchor.shape:
            raise ContractError(f"EWC shape mismatch for {name!r}: {theta.shape} vs {anchor.shape}")
        diff = theta - anchor
        weighted = state.fisher_sum.values[name] * diff
        loss += 0.5 * lam * float(np.sum(weighted * diff))
        grads[name] = lam * weighted
    return EwcPenalty(loss, grads)


def important_fraction(fisher: FisherDiagonal, tau: float = 0.25, normalize: bool = True) -> float:
    """Fraction of coordinates with importance ``>= tau`` (optionally relative to the max)."""
    if tau < 0:
        raise ContractError("tau must be non-negative")
    flat = fisher.flat()
    if flat.size == 0:
        raise ContractError("Fisher diagonal is empty")
    if normalize:
        peak = flat.max()
        if peak <= 0:
            raise DegenerateInputError("cannot normalize an all-zero Fisher diagonal")
        flat = flat / peak
    return float(np.count_nonzero(flat >= tau)) / flat.size
