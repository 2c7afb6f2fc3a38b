"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ewc import EwcSchedule, EwcState, FisherDiagonal, ewc_penalty
from .factorized import FactorizedLinear
from .model import ModelConfig, ToyEncoderClassifier
from .tensor import Graph, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps exactly-zero gradients from dividing roundoff by zero.  A
    central difference with eps=1e-5 on an O(1) loss carries roundoff near
    1e-10, so components much below 1e-5 cannot be resolved to 1e-4 anyway.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckResult:
    max_rel_error: float = 0.0
    by_check: dict[str, float] = field(default_factory=dict)
    coordinates: int = 0

    def record(self, check: str, err: float, n: int) -> None:
        self.by_check[check] = max(self.by_check.get(check, 0.0), err)
        self.max_rel_error = max(self.max_rel_error, err)
        self.coordinates += n

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _spot_check(
    f: Callable[[], float],
    params: dict[str, Tensor],
    analytic: dict[str, np.ndarray],
    rng: np.random.Generator,
    coords: int | None,
    eps: float,
) -> tuple[dict[str, float], int]:
    """Compare ``analytic`` against central differences of ``f`` on sampled coordinates.

    ``f`` reads the parameters' current values, which are perturbed in place.
    """
    worst: dict[str, float] = {}
    total = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None or coords >= flat.size else rng.choice(flat.size, coords, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            numeric[j] = (hi - lo) / (2.0 * eps)
        worst[name] = float(relative_error(analytic[name].reshape(-1)[idx], numeric).max())
        total += len(idx)
    return worst, total


def _role(name: str) -> str:
    return name.rsplit("/", 1)[-1]


def check_layer(rng: np.random.Generator, d_in: int, d_out: int, k: int, coords: int | None, eps: float) -> tuple[dict[str, float], int]:
    layer = FactorizedLinear(d_in, d_out, k, name="layer", rng=rng)
    layer.shared_bias.data = rng.normal(size=d_out)
    layer.add_task("t", 0.5, rng)
    x = Tensor(rng.normal(size=(5, d_in)))
    probe = rng.normal(size=(5, d_out))
    params = dict(layer.parameters())

    def f() -> float:
        return float(np.sum(layer.forward(x, "t").data * probe))

    with Graph() as g:
        loss = T.total(T.hadamard(layer.forward(x, "t"), Tensor(probe)))
    grads = backward(g, loss, list(params.values()))
    worst, n = _spot_check(f, params, {name: grads[t] for name, t in params.items()}, rng, coords, eps)
    by_role: dict[str, float] = {}
    for name, err in worst.items():
        by_role[_role(name)] = max(by_role.get(_role(name), 0.0), err)
    return by_role, n


def check_model(rng: np.random.Generator, cfg: ModelConfig, coords: int | None, eps: float) -> tuple[float, int]:
    model = ToyEncoderClassifier(cfg, seed=int(rng.integers(2**31)))
    for task in ("a", "b"):
        model.add_language(task, 0.3, rng)
    for t in model.shared_parameters().values():
        if t.name.endswith("bias"):
            t.data = rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(3, 4, cfg.d_in))
    y = rng.integers(cfg.n_classes, size=3)
    model.set_trainable(set(model.named_parameters()))
    _, analytic = model.loss_and_grads(x, y, "a")
    # task "b" is registered so routing is exercised, but only "a" is on the loss path
    params = {**model.shared_parameters(), **model.factor_parameters("a")}

    def f() -> float:
        return float(model.loss(x, y, "a").data)

    worst, n = _spot_check(f, params, analytic, rng, coords, eps)
    return max(worst.values()), n


def check_ewc(rng: np.random.Generator, coords: int | None, eps: float) -> tuple[float, int]:
    shapes = {"w": (4, 3), "b": (3,)}
    fisher = FisherDiagonal({n: rng.random(s) for n, s in shapes.items()}, 10, "variance")
    anchor = {n: rng.normal(size=s) for n, s in shapes.items()}
    state = EwcState(fisher, anchor, EwcSchedule(), 1)
    lam = float(rng.uniform(0.1, 10.0))
    params = {n: Tensor(rng.normal(size=s), name=n) for n, s in shapes.items()}
    analytic = ewc_penalty(params, state, lam).grads

    def f() -> float:
        return ewc_penalty(params, state, lam).loss

    worst, n = _spot_check(f, params, analytic, rng, coords, eps)
    return max(worst.values()), n


def grad_check(
    seed: int = 0,
    instances: int = 100,
    *,
    d_model: int = 16,
    n_blocks: int = 2,
    k: int = 2,
    coords: int | None = 4,
    model_coords: int | None = 2,
    eps: float = 1e-5,
) -> GradCheckResult:
    """Run layer, model and EWC gradient checks on ``instances`` seeded draws.

    Odd-numbered instances use the attention variant of the model.  ``coords``
    caps the sampled coordinates per tensor (``None`` checks all of them);
    ``model_coords`` does the same for the full model, whose forward passes
    dominate the cost.
    """
    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    for i in range(instances):
        by_role, n = check_layer(rng, 6, d_model, k, coords, eps)
        for role, err in by_role.items():
            result.record(f"layer/{role}", err, 0)
        result.coordinates += n
        cfg = ModelConfig(d_in=6, d_model=d_model, n_blocks=n_blocks, n_classes=5, k=k, use_attention=bool(i % 2))
        err, n = check_model(rng, cfg, model_coords, eps)
        result.record("model", err, n)
        err, n = check_ewc(rng, coords, eps)
        result.record("ewc", err, n)
    return result
