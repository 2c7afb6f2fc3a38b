"""Linear layer with a shared weight and per-task low-rank factors.

For task ``t`` the effective weight is ``W_S * W_M[t] + W_B[t]`` (elementwise
product) where::

    W_M[t] = 1 + sum_i outer(v_m[i], r_m[i])
    W_B[t] =     sum_i outer(v_b[i], r_b[i])

Weights are laid out ``[D_out, D_in]`` and applied to row-stacked inputs,
``Y = X @ W_eff.T + bias``.  Factor vectors are stored as ``[k, D]`` arrays,
one row per rank component.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DuplicateTaskError, UnknownTaskError
from .tensor import Tensor

FACTOR_ROLES = ("r_m", "v_m", "r_b", "v_b")


@dataclass
class FactorSet:
    task_id: str
    r_m: Tensor  # [k, D_in]
    v_m: Tensor  # [k, D_out]
    r_b: Tensor  # [k, D_in]
    v_b: Tensor  # [k, D_out]

    @property
    def k(self) -> int:
        return self.r_m.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {role: getattr(self, role) for role in FACTOR_ROLES}


@dataclass(frozen=True)
class ParamOverhead:
    added_per_task: int
    fraction_of_dense: float


def param_overhead(k: int, d_in: int, d_out: int) -> ParamOverhead:
    """Parameters one task adds to a single ``[d_out, d_in]`` factorized matrix."""
    if min(k, d_in, d_out) < 1:
        raise ContractError("k, d_in and d_out must be positive")
    added = 2 * k * (d_in + d_out)
    return ParamOverhead(added, added / (d_in * d_out))


class FactorizedLinear:
    def __init__(
        self,
        d_in: int,
        d_out: int,
        k: int,
        *,
        name: str = "linear",
        bias: bool = True,
        rng: np.random.Generator | None = None,
        weight: np.ndarray | None = None,
    ):
        if min(d_in, d_out, k) < 1:
            raise ContractError("d_in, d_out and k must be positive")
        self.d_in, self.d_out, self.k, self.name = d_in, d_out, k, name
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weight = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != (d_out, d_in):
            raise DimensionError(f"{name}: weight shape {list(weight.shape)} != {[d_out, d_in]}")
        self.W_S = Tensor(weight, requires_grad=True, name=f"{name}/W_S")
        self.shared_bias = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}/bias") if bias else None
        self.factors: dict[str, FactorSet] = {}
        self._ones = Tensor(np.ones((d_out, d_in)))

    def __repr__(self) -> str:
        return f"FactorizedLinear({self.name!r}, {self.d_in}->{self.d_out}, k={self.k}, tasks={list(self.factors)})"

    def shared_parameters(self) -> dict[str, Tensor]:
        out = {self.W_S.name: self.W_S}
        if self.shared_bias is not None:
            out[self.shared_bias.name] = self.shared_bias
        return out

    def factor_parameters(self, task: str) -> dict[str, Tensor]:
        return {t.name: t for t in self._factor_set(task).tensors().values()}

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.shared_parameters().items()
        for task in self.factors:
            yield from self.factor_parameters(task).items()

    def _factor_set(self, task: str) -> FactorSet:
        try:
            return self.factors[task]
        except KeyError:
            raise UnknownTaskError(f"{self.name}: task {task!r} is not registered") from None

    def add_task(self, task: str, init_scale: float = 0.01, rng: np.random.Generator | None = None) -> FactorSet:
        """Register ``task`` with factor vectors drawn from Normal(0, init_scale**2)."""
        if task in self.factors:
            raise DuplicateTaskError(f"{self.name}: task {task!r} already registered")
        if init_scale < 0:
            raise ContractError("init_scale must be non-negative")
        rng = rng if rng is not None else np.random.default_rng()
        dims = {"r_m": self.d_in, "v_m": self.d_out, "r_b": self.d_in, "v_b": self.d_out}
        made = {
            role: Tensor(
                rng.normal(0.0, 1.0, size=(self.k, dims[role])) * init_scale,
                requires_grad=True,
                name=f"{self.name}/task/{task}/{role}",
            )
            for role in FACTOR_ROLES
        }
        fs = FactorSet(task, **made)
        self.factors[task] = fs
        return fs

    def materialize_task_matrices(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(W_M, W_B)`` for ``task``, each ``[D_out, D_in]``."""
        fs = self._factor_set(task)
        w_m = np.ones((self.d_out, self.d_in))
        w_b = np.zeros((self.d_out, self.d_in))
        for i in range(self.k):
            w_m += np.outer(fs.v_m.data[i], fs.r_m.data[i])
            w_b += np.outer(fs.v_b.data[i], fs.r_b.data[i])
        return w_m, w_b

    def dense_weight(self, task: str | None) -> np.ndarray:
        """Effective weight as a plain array (``task=None`` is the shared-only route)."""
        if task is None:
            return self.W_S.data.copy()
        w_m, w_b = self.materialize_task_matrices(task)
        return self.W_S.data * w_m + w_b

    def effective_weight(self, task: str | None) -> Tensor:
        if task is None:
            return self.W_S
        fs = self._factor_set(task)
        w_m = T.add(T.matmul(T.transpose(fs.v_m), fs.r_m), self._ones)
        w_b = T.matmul(T.transpose(fs.v_b), fs.r_b)
        return T.add(T.hadamard(self.W_S, w_m), w_b)

    def forward(self, x: Tensor, task: str | None) -> Tensor:
        """Apply the task's effective weight to row-stacked ``x`` of shape ``[n, D_in]``."""
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"{self.name}: input shape {list(x.shape)} does not match D_in={self.d_in}")
        y = T.matmul(x, T.transpose(self.effective_weight(task)))
        if self.shared_bias is not None:
            y = T.add(y, self.shared_bias)
        return y

    __call__ = forward
