"""Initial and continual training under the five strategies.

Every random choice is derived from ``plan.seed`` plus counters (iteration,
task, epoch, step), so a run is a pure function of ``(seed, plan, suite)``
and can resume from any saved step.
"""

from __future__ import annotations

import copy
import logging
import zlib
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np

from .errors import ContractError, DimensionError, DuplicateTaskError, NumericError
from .ewc import EwcSchedule, EwcState, FisherDiagonal, accumulate_fisher, estimate_fisher, ewc_penalty
from .model import ModelConfig, ToyEncoderClassifier
from .tasks import TaskSuite

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    VANILLA = "vanilla"
    EWC = "ewc"
    WF_FROZEN = "wf_frozen"
    WF_FINETUNE = "wf_finetune"
    WF_EWC = "wf_ewc"

    @property
    def uses_factors(self) -> bool:
        return self in (Strategy.WF_FROZEN, Strategy.WF_FINETUNE, Strategy.WF_EWC)

    @property
    def uses_ewc(self) -> bool:
        return self in (Strategy.EWC, Strategy.WF_EWC)

    @property
    def trains_shared(self) -> bool:
        return self is not Strategy.WF_FROZEN


@dataclass(frozen=True)
class TrainPlan:
    steps_initial: int = 20000
    steps_per_iteration: int = 3000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 400
    lr_decay: str = "inverse_sqrt"  # or "none"
    grad_clip_norm: float = 4.0
    clip_mode: str = "clip"  # "rescale" always scales to exactly grad_clip_norm
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ewc_lambda0: float = 100.0
    ewc_decay_factor: float = 10.0
    ewc_decay_interval: int = 1000
    ewc_anchor: str = "refresh"  # or "fixed": keep the iteration-0 anchor
    fisher_estimator: str = "variance"
    fisher_max_samples: int | None = None  # per task; None uses the whole training split
    checkpoint_every: int = 250
    average_last_n: int = 10
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.warmup_steps < 1:
            raise ContractError("warmup_steps must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ContractError("grad_clip_norm must be > 0")
        if self.ewc_lambda0 < 0:
            raise ContractError("ewc_lambda0 must be >= 0")
        if min(self.steps_initial, self.steps_per_iteration, self.batch_size) < 1:
            raise ContractError("step counts and batch_size must be >= 1")
        if self.checkpoint_every < 1 or self.average_last_n < 0:
            raise ContractError("invalid checkpoint settings")
        if self.lr_decay not in ("inverse_sqrt", "none"):
            raise ContractError(f"unknown lr_decay {self.lr_decay!r}")
        if self.clip_mode not in ("clip", "rescale"):
            raise ContractError(f"unknown clip_mode {self.clip_mode!r}")
        if self.ewc_anchor not in ("refresh", "fixed"):
            raise ContractError(f"unknown ewc_anchor {self.ewc_anchor!r}")
        if self.fisher_estimator not in ("variance", "mean_square"):
            raise ContractError(f"unknown fisher_estimator {self.fisher_estimator!r}")
        if self.fisher_max_samples is not None and self.fisher_max_samples < 1:
            raise ContractError("fisher_max_samples must be >= 1 (or None for the whole split)")

    @property
    def ewc_schedule(self) -> EwcSchedule:
        return EwcSchedule(self.ewc_lambda0, self.ewc_decay_factor, self.ewc_decay_interval)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


@dataclass
class Snapshot:
    step: int
    score: float
    params: dict[str, np.ndarray]


@dataclass
class TrainState:
    model: ToyEncoderClassifier
    plan: TrainPlan
    adam: AdamState = field(default_factory=AdamState)
    ewc: EwcState | None = None
    iteration: int = 0
    step: int = 0
    local_step: int = 0
    steps_target: int = 0
    strategy: Strategy | None = None
    active_tasks: list[str] = field(default_factory=list)
    trainable: list[str] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)
    history: list[dict[str, Any]] = field(default_factory=list)

    def copy(self) -> TrainState:
        return copy.deepcopy(self)


# ---------------------------------------------------------------------- schedules & updates


def lr_schedule(step: int, plan: TrainPlan) -> float:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay."""
    if step < 1:
        raise ContractError("lr_schedule step starts at 1")
    warm = step / plan.warmup_steps
    if plan.lr_decay == "none":
        return plan.peak_lr * min(warm, 1.0)
    return plan.peak_lr * min(warm, np.sqrt(plan.warmup_steps / step))


def ewc_lambda(step: int, plan: TrainPlan) -> float:
    return plan.ewc_schedule.at(step)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float, mode: str = "clip") -> dict[str, np.ndarray]:
    """Scale all gradients jointly so the global L2 norm does not exceed ``max_norm``.

    ``mode="rescale"`` scales to exactly ``max_norm`` even when the norm is smaller.
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be > 0")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name!r}")
        raise NumericError("gradient norm overflows")
    if norm == 0.0 or (mode == "clip" and norm <= max_norm):
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


def adam_update(
    params: dict[str, Any],
    grads: dict[str, np.ndarray],
    moments: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam step for every parameter in ``grads`` (Tensors updated in place).

    Parameters sharing a step count are updated together as one flat vector.
    """
    by_t: dict[int, list[str]] = {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {list(g.shape)} vs parameter {list(p.shape)} for {name!r}")
        if name in moments.m and moments.m[name].shape != g.shape:
            raise DimensionError(f"adam: moment shape mismatch for {name!r}")
        by_t.setdefault(moments.t.get(name, 0) + 1, []).append(name)
    for t, names in by_t.items():
        g = np.concatenate([grads[n].reshape(-1) for n in names])
        m = np.concatenate([moments.m[n].reshape(-1) if n in moments.m else np.zeros(grads[n].size) for n in names])
        v = np.concatenate([moments.v[n].reshape(-1) if n in moments.v else np.zeros(grads[n].size) for n in names])
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        step = (lr / (1.0 - beta1**t)) * m / (np.sqrt(v / (1.0 - beta2**t)) + eps)
        pos = 0
        for n in names:
            p = params[n]
            size = p.data.size
            sl = slice(pos, pos + size)
            p.data = p.data - step[sl].reshape(p.shape)
            moments.m[n] = m[sl].reshape(p.shape)
            moments.v[n] = v[sl].reshape(p.shape)
            moments.t[n] = t
            pos += size


def average_checkpoints(
    checkpoints: Sequence[dict[str, np.ndarray]],
    n: int,
    dev_scores: Sequence[float],
    steps: Sequence[int] | None = None,
) -> dict[str, np.ndarray]:
    """Mean of the ``n`` checkpoints with the highest dev score (ties favour later steps)."""
    if len(checkpoints) != len(dev_scores):
        raise ContractError("one dev score per checkpoint required")
    if not 1 <= n <= len(checkpoints):
        raise ContractError(f"cannot average {n} of {len(checkpoints)} checkpoints")
    steps = list(range(len(checkpoints))) if steps is None else list(steps)
    ranked = sorted(range(len(checkpoints)), key=lambda i: (dev_scores[i], steps[i]), reverse=True)
    chosen = sorted(ranked[:n], key=lambda i: steps[i])
    names = list(checkpoints[chosen[0]])
    out = {}
    for name in names:
        stack = []
        for i in chosen:
            if name not in checkpoints[i] or checkpoints[i][name].shape != checkpoints[chosen[0]][name].shape:
                raise DimensionError(f"checkpoint {i} disagrees on parameter {name!r}")
            stack.append(checkpoints[i][name])
        acc = np.zeros_like(stack[0], dtype=np.float64)
        for arr in stack:
            acc = acc + arr
        out[name] = acc / len(stack)
    return out


# ---------------------------------------------------------------------- seeding helpers


def _tag(task_id: str) -> int:
    return zlib.crc32(task_id.encode("utf-8"))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def _factor_rng(plan: TrainPlan, task_id: str) -> np.random.Generator:
    return np.random.default_rng(_seed(plan.seed, 7, _tag(task_id)))


def task_batch(state: TrainState, suite: TaskSuite, task_id: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``index``-th training batch for ``task_id`` in the current iteration.

    Batches cycle through seeded epoch permutations; each epoch covers the
    split exactly once.
    """
    ds = suite.dataset(task_id, "train")
    bs = state.plan.batch_size
    per_epoch = -(-len(ds) // bs)
    epoch, within = divmod(index, per_epoch)
    order = np.random.default_rng(_seed(state.plan.seed, 11, state.iteration, _tag(task_id), epoch)).permutation(len(ds))
    idx = order[within * bs : (within + 1) * bs]
    return ds.x[idx], ds.y[idx]


# ---------------------------------------------------------------------- iteration machinery


def error_rate(model: ToyEncoderClassifier, x: np.ndarray, y: np.ndarray, task: str, chunk: int = 1024) -> float:
    wrong = 0
    for start in range(0, len(y), chunk):
        pred = model.predict(x[start : start + chunk], task)
        wrong += int(np.count_nonzero(pred != y[start : start + chunk]))
    return wrong / len(y)


def _dev_score(state: TrainState, suite: TaskSuite) -> float:
    accs = []
    for task in state.active_tasks:
        ds = suite.dataset(task, "dev")
        accs.append(1.0 - error_rate(state.model, ds.x, ds.y, task))
    return float(np.mean(accs))


def begin_iteration(state: TrainState, tasks: Sequence[str], strategy: Strategy | None, trainable: set[str], steps: int) -> None:
    state.model.set_trainable(trainable)
    state.trainable = [n for n in state.model.named_parameters() if n in trainable]
    state.active_tasks = list(tasks)
    state.strategy = strategy
    state.adam = AdamState()
    state.local_step = 0
    state.steps_target = steps
    state.snapshots = []


def train_step(state: TrainState, suite: TaskSuite) -> float:
    """One optimizer step on the next round-robin task batch; returns the total loss."""
    plan, model = state.plan, state.model
    s = state.local_step + 1
    n_tasks = len(state.active_tasks)
    task = state.active_tasks[(s - 1) % n_tasks]
    x, y = task_batch(state, suite, task, (s - 1) // n_tasks)
    dropout_rng = None
    if model.cfg.dropout > 0:
        dropout_rng = np.random.default_rng(_seed(plan.seed, 13, state.iteration, s))
    loss, grads = model.loss_and_grads(x, y, task, dropout_rng=dropout_rng)
    if state.strategy is not None and state.strategy.uses_ewc:
        params = model.named_parameters()
        pen = ewc_penalty(params, state.ewc, ewc_lambda(s - 1, plan))
        loss += pen.loss
        for name, g in pen.grads.items():
            if name in grads:
                grads[name] = grads[name] + g
    grads = clip_gradients(grads, plan.grad_clip_norm, plan.clip_mode)
    adam_update(
        model.named_parameters(), grads, state.adam, lr_schedule(s, plan),
        plan.adam_beta1, plan.adam_beta2, plan.adam_eps,
    )
    state.local_step = s
    state.step += 1
    return loss


def _maybe_snapshot(state: TrainState, suite: TaskSuite) -> None:
    s = state.local_step
    if s % state.plan.checkpoint_every == 0 or s == state.steps_target:
        if state.snapshots and state.snapshots[-1].step == s:
            return
        params = state.model.named_parameters()
        state.snapshots.append(
            Snapshot(s, _dev_score(state, suite), {n: params[n].data.copy() for n in state.trainable})
        )


def run_steps(state: TrainState, suite: TaskSuite, n: int | None = None) -> TrainState:
    """Advance up to ``n`` steps (default: to the end of the iteration)."""
    end = state.steps_target if n is None else min(state.steps_target, state.local_step + n)
    while state.local_step < end:
        loss = train_step(state, suite)
        _maybe_snapshot(state, suite)
        if state.local_step % 1000 == 0:
            log.debug("iteration %d step %d loss %.4f", state.iteration, state.local_step, loss)
    return state


def _fisher_for_tasks(state: TrainState, suite: TaskSuite, tasks: Sequence[str]) -> FisherDiagonal:
    model, plan = state.model, state.plan
    shared = list(model.shared_parameters())
    saved = {name: t.requires_grad for name, t in model.named_parameters().items()}
    model.set_trainable(set(shared))
    samples = []
    for task in tasks:
        ds = suite.dataset(task, "train")
        n = len(ds) if plan.fisher_max_samples is None else min(len(ds), plan.fisher_max_samples)
        for i in range(n):
            samples.append((task, ds.x[i], ds.y[i]))

    def grad_fn(sample):
        task, x, y = sample
        return model.loss_and_grads(x[None], np.array([y]), task)[1]

    try:
        return estimate_fisher(grad_fn, samples, shared, plan.fisher_estimator)
    finally:
        for name, t in model.named_parameters().items():
            t.requires_grad = saved[name]


def finish_iteration(state: TrainState, suite: TaskSuite) -> TrainState:
    """Checkpoint-average, fold the new tasks' Fisher into the EWC state, advance the iteration."""
    if state.local_step != state.steps_target:
        raise ContractError("iteration has not reached its step target")
    plan, model = state.plan, state.model
    if state.snapshots and plan.average_last_n > 0 and state.trainable:
        snaps = state.snapshots
        avg = average_checkpoints(
            [s.params for s in snaps], min(plan.average_last_n, len(snaps)),
            [s.score for s in snaps], [s.step for s in snaps],
        )
        model.load_arrays(avg)
    fisher = _fisher_for_tasks(state, suite, state.active_tasks)
    current = {n: t.data.copy() for n, t in model.shared_parameters().items()}
    if state.ewc is None:
        state.ewc = EwcState(fisher, current, plan.ewc_schedule, 1)
    else:
        total = accumulate_fisher(state.ewc.fisher_sum, fisher)
        anchor = current if plan.ewc_anchor == "refresh" else state.ewc.anchor
        state.ewc = EwcState(total, anchor, plan.ewc_schedule, state.ewc.iteration_count + 1)
    state.history.append(
        {
            "iteration": state.iteration,
            "strategy": state.strategy.value if state.strategy else "initial",
            "tasks": list(state.active_tasks),
            "steps": state.local_step,
        }
    )
    state.iteration += 1
    state.snapshots = []
    state.model.set_trainable(set())
    state.trainable = []
    return state


def init_state(plan: TrainPlan, model_cfg: ModelConfig) -> TrainState:
    return TrainState(ToyEncoderClassifier(model_cfg, seed=_seed(plan.seed, 5)), plan)


def start_initial(
    suite: TaskSuite, plan: TrainPlan, model_cfg: ModelConfig,
    tasks: Sequence[str] | None = None, steps: int | None = None,
) -> TrainState:
    tasks = list(suite.groups()[0] if tasks is None else tasks)
    if not tasks:
        raise ContractError("initial training needs at least one task")
    state = init_state(plan, model_cfg)
    for task in tasks:
        state.model.add_language(task, plan.init_scale, _factor_rng(plan, task))
    trainable = set(state.model.shared_parameters())
    for task in tasks:
        trainable |= set(state.model.factor_parameters(task))
    begin_iteration(state, tasks, None, trainable, plan.steps_initial if steps is None else steps)
    return state


def train_initial(
    suite: TaskSuite, plan: TrainPlan, model_cfg: ModelConfig,
    tasks: Sequence[str] | None = None, steps: int | None = None,
) -> TrainState:
    """Jointly train the first group (or ``tasks``) with interleaved task batches."""
    state = start_initial(suite, plan, model_cfg, tasks, steps)
    run_steps(state, suite)
    return finish_iteration(state, suite)


def start_continual(state: TrainState, new_tasks: Sequence[str], strategy: Strategy | str) -> TrainState:
    strategy = Strategy(strategy)
    state = state.copy()
    model, plan = state.model, state.plan
    new_tasks = list(new_tasks)
    if not new_tasks:
        raise ContractError("continual step needs at least one new task")
    for task in new_tasks:
        if task in model.tasks or new_tasks.count(task) > 1:
            raise DuplicateTaskError(f"task {task!r} already registered")
    if strategy.uses_ewc and state.ewc is None:
        raise ContractError(f"strategy {strategy.value} needs an EWC state")
    for task in new_tasks:
        model.add_language(task, plan.init_scale, _factor_rng(plan, task), factorized=strategy.uses_factors)
    trainable: set[str] = set()
    if strategy.trains_shared:
        trainable |= set(model.shared_parameters())
    for task in new_tasks:
        trainable |= set(model.factor_parameters(task))
    begin_iteration(state, new_tasks, strategy, trainable, plan.steps_per_iteration)
    return state


def continual_step(
    state: TrainState, suite: TaskSuite, new_tasks: Sequence[str], strategy: Strategy | str,
) -> TrainState:
    """Learn ``new_tasks`` under ``strategy``; the input state is left untouched."""
    new_state = start_continual(state, new_tasks, strategy)
    run_steps(new_state, suite)
    return finish_iteration(new_state, suite)


def with_plan(state: TrainState, **changes: Any) -> TrainState:
    """Copy of ``state`` with plan fields replaced (e.g. a different EWC coefficient)."""
    out = state.copy()
    out.plan = replace(out.plan, **changes)
    if out.ewc is not None:
        out.ewc = EwcState(out.ewc.fisher_sum, out.ewc.anchor, out.plan.ewc_schedule, out.ewc.iteration_count)
    return out
