"""Desk-scale encoder-classifier built from factorized layers.

Frames ``[L, d_in]`` go through a factorized input projection, ``n_blocks``
residual blocks ``h + act(W h + b)`` (optionally preceded by a residual
single-head self-attention block with factorized Q/K/V/O projections), mean
pooling over frames and a plain, never-factorized output projection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DuplicateTaskError, UnknownTaskError
from .factorized import FactorizedLinear, param_overhead
from .tensor import Graph, Tensor, backward


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 32
    d_model: int = 64
    n_blocks: int = 2
    n_classes: int = 10
    k: int = 4
    activation: str = "tanh"
    use_attention: bool = False
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if min(self.d_in, self.d_model, self.n_blocks, self.k) < 1:
            raise ContractError("model dimensions must be >= 1")
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")
        if self.activation not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class ToyEncoderClassifier:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.input_proj = FactorizedLinear(cfg.d_in, cfg.d_model, cfg.k, name="input_proj", rng=rng)
        self.attention: list[dict[str, FactorizedLinear]] = []
        self.blocks: list[FactorizedLinear] = []
        for i in range(cfg.n_blocks):
            if cfg.use_attention:
                self.attention.append(
                    {
                        role: FactorizedLinear(cfg.d_model, cfg.d_model, cfg.k, name=f"attn{i}/{role}", rng=rng)
                        for role in ("q", "k", "v", "o")
                    }
                )
            self.blocks.append(FactorizedLinear(cfg.d_model, cfg.d_model, cfg.k, name=f"block{i}", rng=rng))
        self.out_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model), size=(cfg.n_classes, cfg.d_model)),
            requires_grad=True,
            name="output_proj/W",
        )
        self.out_b = Tensor(np.zeros(cfg.n_classes), requires_grad=True, name="output_proj/bias")
        # task id -> True when the task owns factor sets, False for the shared-only route
        self.tasks: dict[str, bool] = {}

    # ------------------------------------------------------------------ registry

    def factorized_layers(self) -> list[FactorizedLinear]:
        layers = [self.input_proj]
        for i, block in enumerate(self.blocks):
            if self.attention:
                layers.extend(self.attention[i][r] for r in ("q", "k", "v", "o"))
            layers.append(block)
        return layers

    def add_language(
        self,
        task: str,
        init_scale: float = 0.01,
        rng: np.random.Generator | None = None,
        *,
        factorized: bool = True,
    ) -> None:
        """Register ``task``; factorized tasks get a fresh factor set in every layer."""
        if task in self.tasks:
            raise DuplicateTaskError(f"task {task!r} already registered")
        if init_scale < 0:
            raise ContractError("init_scale must be non-negative")
        if factorized:
            rng = rng if rng is not None else np.random.default_rng()
            for layer in self.factorized_layers():
                layer.add_task(task, init_scale, rng)
        self.tasks[task] = factorized

    def _route(self, task: str) -> str | None:
        try:
            return task if self.tasks[task] else None
        except KeyError:
            raise UnknownTaskError(f"task {task!r} is not registered") from None

    def shared_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.factorized_layers():
            out.update(layer.shared_parameters())
        out[self.out_w.name] = self.out_w
        out[self.out_b.name] = self.out_b
        return out

    def factor_parameters(self, task: str) -> dict[str, Tensor]:
        if not self._route(task):
            return {}
        out: dict[str, Tensor] = {}
        for layer in self.factorized_layers():
            out.update(layer.factor_parameters(task))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.shared_parameters()
        for task in self.tasks:
            out.update(self.factor_parameters(task))
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def language_overhead(self) -> int:
        """Parameters added by one factorized ``add_language`` call."""
        return sum(param_overhead(l.k, l.d_in, l.d_out).added_per_task for l in self.factorized_layers())

    def set_trainable(self, names: set[str]) -> None:
        for name, t in self.named_parameters().items():
            t.requires_grad = name in names

    # ------------------------------------------------------------------ compute

    def _act(self, x: Tensor) -> Tensor:
        return T.tanh(x) if self.cfg.activation == "tanh" else T.relu(x)

    def _dropout(self, h: Tensor, rng: np.random.Generator | None) -> Tensor:
        p = self.cfg.dropout
        if rng is None or p == 0.0:
            return h
        mask = (rng.random(h.shape) >= p) / (1.0 - p)
        return T.hadamard(h, Tensor(mask))

    def forward(self, x: np.ndarray, task: str, *, dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``[b, n_classes]`` for frames ``[b, L, d_in]`` (or one sequence ``[L, d_in]``)."""
        route = self._route(task)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.cfg.d_in:
            raise DimensionError(f"frames of shape {list(x.shape)} do not match d_in={self.cfg.d_in}")
        b, seq_len, _ = x.shape
        h = self.input_proj(Tensor(x.reshape(b * seq_len, -1)), route)
        for i, block in enumerate(self.blocks):
            if self.attention:
                proj = self.attention[i]
                att = T.seq_attention(proj["q"](h, route), proj["k"](h, route), proj["v"](h, route), seq_len)
                h = T.add(h, self._dropout(proj["o"](att, route), dropout_rng))
            h = T.add(h, self._dropout(self._act(block(h, route)), dropout_rng))
        pooled = T.mean_pool(h, seq_len)
        return T.add(T.matmul(pooled, T.transpose(self.out_w)), self.out_b)

    def logits(self, x: np.ndarray, task: str) -> np.ndarray:
        return self.forward(x, task).data

    def loss(self, x: np.ndarray, y: np.ndarray, task: str, **kw: Any) -> Tensor:
        """Mean cross-entropy of labels ``y`` over the batch ``x``."""
        y = np.asarray(y).reshape(-1)
        if y.size == 0:
            raise ContractError("loss needs a non-empty batch")
        return T.log_softmax_nll(self.forward(x, task, **kw), y)

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, task: str, **kw: Any) -> tuple[float, dict[str, np.ndarray]]:
        """Loss value and gradients for every parameter currently requiring grad."""
        with Graph() as g:
            loss = self.loss(x, y, task, **kw)
        trainable = [t for t in self.named_parameters().values() if t.requires_grad]
        if not g.nodes:
            return float(loss.data), {t.name: np.zeros(t.shape) for t in trainable}
        grads = backward(g, loss, trainable)
        return float(loss.data), {t.name: grads[t] for t in trainable}

    def predict(self, x: np.ndarray, task: str) -> np.ndarray | int:
        """Argmax class; ties go to the lowest class id."""
        logits = self.logits(x, task)
        pred = np.argmax(logits, axis=1)
        return int(pred[0]) if np.asarray(x).ndim == 2 else pred

    # ------------------------------------------------------------------ state

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, arr in arrays.items():
            if name not in params:
                raise ContractError(f"unknown parameter {name!r}")
            if params[name].shape != arr.shape:
                raise DimensionError(f"{name}: shape {list(arr.shape)} != {list(params[name].shape)}")
            params[name].data = np.array(arr, dtype=np.float64, order="C", copy=True)
