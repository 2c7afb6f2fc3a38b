"""Command-line front end: ``clwf <subcommand> [flags]``.

Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
errors.  Every subcommand validates its whole configuration before it touches
the filesystem.  Settings may come from an INI file (``--config``) with the
sections ``[model]``, ``[plan]``, ``[gen]`` and ``[run]``; command-line flags
override the file.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ClwfError, ConfigError
from .ewc import important_fraction
from .gradcheck import grad_check
from .metrics import EvalReport, emit, evaluate, evaluate_into
from .model import ModelConfig
from .tasks import GenConfig, TaskSuite, generate_suite
from .trainer import Strategy, TrainPlan, continual_step, train_initial, with_plan

log = logging.getLogger("clwf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
STRATEGIES = [s.value for s in Strategy]
FORMATS = ("csv", "json")
_SECTIONS = {"model": ModelConfig, "plan": TrainPlan, "gen": GenConfig}


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    gen: GenConfig = field(default_factory=GenConfig)
    tasks_per_group: tuple[int, ...] = (4, 2)
    strategy: str | None = None
    new_tasks: tuple[str, ...] = ()
    threshold: float = 0.25
    normalize: bool = True
    formats: tuple[str, ...] = FORMATS
    seeds: tuple[int, ...] = (0, 1, 2)
    data: Path | None = None
    ckpt: Path | None = None
    out: Path | None = None


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------- parsing values


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected true/false, got {raw!r}")


def _parse_list(raw: str) -> list[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def _coerce(raw: str, default: Any, annotation: str, key: str) -> Any:
    text = raw.strip()
    try:
        if "None" in annotation and text.lower() == "none":
            return None
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int) or (default is None and "int" in annotation):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, dict):
            pairs = {}
            for item in _parse_list(text):
                name, _, value = item.partition(":")
                pairs[name.strip()] = int(value)
            return pairs
        return text
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _apply(section_cls: type, base: Any, values: dict[str, str], where: str) -> Any:
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        f = known[key]
        changes[key] = _coerce(raw, getattr(base, key), str(f.type), f"{where}.{key}")
    try:
        return dataclasses.replace(base, **changes)
    except (ClwfError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


_RUN_KEYS = ("seed", "tasks_per_group", "strategy", "new_tasks", "threshold", "normalize", "formats", "seeds",
             "data", "ckpt", "out")


def _run_value(key: str, raw: str) -> Any:
    try:
        if key == "seed":
            return _parse_seed(raw)
        if key == "tasks_per_group":
            return tuple(int(v) for v in _parse_list(raw))
        if key == "seeds":
            return tuple(_parse_seed(v) for v in _parse_list(raw))
        if key in ("new_tasks", "formats"):
            return tuple(_parse_list(raw))
        if key == "threshold":
            return float(raw)
        if key == "normalize":
            return _parse_bool(raw)
        if key in ("data", "ckpt", "out"):
            return Path(raw.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"run.{key}: cannot parse {raw!r} ({exc})") from None


def _parse_seed(raw: str) -> int:
    value = int(str(raw).strip())
    if not 0 <= value < 2**64:
        raise ConfigError(f"seed {value} is outside the unsigned 64-bit range")
    return value


def read_config(path: Path, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    """Load an INI file on top of ``cfg`` (defaults when omitted)."""
    cfg = cfg or ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep keys case-sensitive
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    for section in parser.sections():
        values = dict(parser.items(section))
        if section in _SECTIONS:
            setattr(cfg, section, _apply(_SECTIONS[section], getattr(cfg, section), values, section))
        elif section == "run":
            for key, raw in values.items():
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [run]")
                setattr(cfg, key, _run_value(key, raw))
        else:
            raise ConfigError(f"unknown config section [{section}]")
    return cfg


# --------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clwf", description="Continual learning with factorized weights and EWC on synthetic tasks.")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", help="master seed (unsigned 64-bit)")
        p.add_argument("--config", type=Path, help="INI file with [model], [plan], [gen], [run] sections")

    p = sub.add_parser("gen-tasks", help="generate a seeded task suite")
    common(p)
    p.add_argument("--out", type=Path, help="output directory for the suite")
    p.add_argument("--groups", help="tasks per group, e.g. 4,2")

    p = sub.add_parser("train-initial", help="jointly train the first task group")
    common(p)
    p.add_argument("--data", type=Path, help="suite directory written by gen-tasks")
    p.add_argument("--out", type=Path, help="checkpoint directory to write")
    p.add_argument("--steps", type=int, help="override the step budget")

    p = sub.add_parser("continue", help="learn new tasks with one of the strategies")
    common(p)
    p.add_argument("--ckpt", type=Path, help="checkpoint to continue from")
    p.add_argument("--data", type=Path, help="suite directory")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--new-tasks", help="comma-separated task ids (default: the next unseen group)")
    p.add_argument("--out", type=Path, help="checkpoint directory to write")
    p.add_argument("--lambda0", type=float, help="override the initial EWC coefficient")
    p.add_argument("--steps", type=int, help="override the step budget")

    p = sub.add_parser("evaluate", help="print per-task error rates of a checkpoint")
    common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--tasks", help="comma-separated task ids (default: all registered)")

    p = sub.add_parser("report", help="evaluate checkpoints and write report files")
    common(p)
    p.add_argument("--ckpt", type=Path, nargs="+", help="one or more checkpoints, e.g. one per iteration")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--formats", help="comma-separated subset of csv,json")
    p.add_argument("--threshold", type=float)
    p.add_argument("--normalize", choices=("true", "false"))

    p = sub.add_parser("fisher-stats", help="importance statistics of a checkpoint's Fisher diagonal")
    common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--threshold", type=float)
    p.add_argument("--normalize", choices=("true", "false"))

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("bench", help="five-strategy comparison over several seeds")
    common(p)
    p.add_argument("--out", type=Path)
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--strategies", help="comma-separated subset of strategies")
    p.add_argument("--no-joint", action="store_true", help="skip the joint-training baseline")
    p.add_argument("--formats", help="comma-separated subset of csv,json")
    p.add_argument("--threshold", type=float)
    return parser


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, the config file and flags (flags win), then validate."""
    cfg = read_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        try:
            cfg.seed = _parse_seed(args.seed)
        except ValueError:
            raise ConfigError(f"--seed: expected an unsigned integer, got {args.seed!r}") from None
    for key in ("data", "out"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    ckpt = getattr(args, "ckpt", None)
    if isinstance(ckpt, Path):
        cfg.ckpt = ckpt
    if getattr(args, "strategy", None):
        cfg.strategy = args.strategy
    if getattr(args, "new_tasks", None):
        cfg.new_tasks = tuple(_parse_list(args.new_tasks))
    if getattr(args, "groups", None):
        cfg.tasks_per_group = _run_value("tasks_per_group", args.groups)
    if getattr(args, "threshold", None) is not None:
        cfg.threshold = args.threshold
    if getattr(args, "normalize", None) is not None:
        cfg.normalize = _parse_bool(args.normalize)
    if getattr(args, "formats", None):
        cfg.formats = tuple(_parse_list(args.formats))
    if getattr(args, "seeds", None):
        cfg.seeds = _run_value("seeds", args.seeds)
    plan_changes = {"seed": cfg.seed}
    if getattr(args, "lambda0", None) is not None:
        plan_changes["ewc_lambda0"] = args.lambda0
    try:
        cfg.plan = dataclasses.replace(cfg.plan, **plan_changes)
    except ClwfError as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.tasks_per_group or min(cfg.tasks_per_group) < 1:
        raise ConfigError("tasks_per_group needs at least one group with >= 1 task")
    if cfg.strategy is not None and cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}; choose from {', '.join(STRATEGIES)}")
    if cfg.threshold < 0:
        raise ConfigError("threshold must be non-negative")
    unknown = set(cfg.formats) - set(FORMATS)
    if unknown or not cfg.formats:
        raise ConfigError(f"formats must be a non-empty subset of csv,json (got {','.join(cfg.formats)})")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")


def _require(cfg: ExperimentConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise ConfigError(f"--{name} is required")


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise ConfigError(f"{what} {path} does not exist")


def _check_writable(path: Path) -> None:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")


def _configure_logging() -> None:
    level_name = os.environ.get("CLWF_LOG", "WARNING").strip().upper() or "WARNING"
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ConfigError(f"CLWF_LOG={level_name!r} is not a logging level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("clwf").setLevel(level)


# --------------------------------------------------------------------- commands


def cmd_gen_tasks(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _require(cfg, "out")
    _check_writable(cfg.out)
    suite = generate_suite(len(cfg.tasks_per_group), list(cfg.tasks_per_group), cfg.seed, cfg.gen)
    suite.save(cfg.out)
    for gi, group in enumerate(suite.groups()):
        print(f"group {gi}: {' '.join(group)}")
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_train_initial(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _require(cfg, "data", "out")
    _require_dir(cfg.data, "suite directory")
    _check_writable(cfg.out)
    if args.steps is not None and args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    suite = TaskSuite.load(cfg.data)
    state = train_initial(suite, cfg.plan, cfg.model, steps=args.steps)
    digest = save_checkpoint(state, cfg.out)
    for task in state.active_tasks if state.active_tasks else suite.groups()[0]:
        print(f"{task} test_error {evaluate(state.model, suite, task):.4f}")
    print(f"checkpoint {cfg.out} sha256 {digest}")
    return EXIT_OK


def _next_group(suite: TaskSuite, registered: set[str]) -> list[str]:
    for group in suite.groups():
        if not registered & set(group):
            return group
    raise ConfigError("every group in the suite is already registered; pass --new-tasks")


def cmd_continue(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _require(cfg, "ckpt", "data", "out", "strategy")
    _require_dir(cfg.ckpt, "checkpoint")
    _require_dir(cfg.data, "suite directory")
    _check_writable(cfg.out)
    if args.steps is not None and args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    suite = TaskSuite.load(cfg.data)
    state = load_checkpoint(cfg.ckpt)
    new_tasks = list(cfg.new_tasks) or _next_group(suite, set(state.model.tasks))
    known = {t for g in suite.groups() for t in g}
    for task in new_tasks:
        if task not in known:
            raise ConfigError(f"task {task!r} is not part of the suite")
        if task in state.model.tasks:
            raise ConfigError(f"task {task!r} is already registered in the checkpoint")
    changes: dict[str, Any] = {"seed": cfg.seed}
    if args.lambda0 is not None:
        changes["ewc_lambda0"] = args.lambda0
    if args.steps is not None:
        changes["steps_per_iteration"] = args.steps
    state = with_plan(state, **changes)
    new_state = continual_step(state, suite, new_tasks, cfg.strategy)
    digest = save_checkpoint(new_state, cfg.out)
    for task in new_state.model.tasks:
        print(f"{task} test_error {evaluate(new_state.model, suite, task):.4f}")
    print(f"checkpoint {cfg.out} sha256 {digest}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _require(cfg, "ckpt", "data")
    _require_dir(cfg.ckpt, "checkpoint")
    _require_dir(cfg.data, "suite directory")
    suite = TaskSuite.load(cfg.data)
    state = load_checkpoint(cfg.ckpt)
    tasks = _parse_list(args.tasks) if args.tasks else list(state.model.tasks)
    for task in tasks:
        if task not in state.model.tasks:
            raise ConfigError(f"task {task!r} is not registered in the checkpoint")
    for task in tasks:
        print(f"{task} {args.split}_error {evaluate(state.model, suite, task, args.split):.4f}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    _require(cfg, "data", "out")
    for path in args.ckpt:
        _require_dir(path, "checkpoint")
    _require_dir(cfg.data, "suite directory")
    _check_writable(cfg.out)
    suite = TaskSuite.load(cfg.data)
    report = EvalReport()
    states = [load_checkpoint(path) for path in args.ckpt]
    # One label for the whole sequence so degradation is tracked across checkpoints.
    labelled = [s.strategy.value for s in states if s.strategy is not None]
    strategy = labelled[-1] if labelled else "initial"
    for state in states:
        iteration = state.iteration - 1
        evaluate_into(report, state.model, suite, iteration, strategy)
        if state.ewc is not None:
            frac = important_fraction(state.ewc.fisher_sum, cfg.threshold, cfg.normalize)
            report.add_importance(iteration, strategy, cfg.threshold, cfg.normalize, frac)
    report.meta = {"suite": suite.describe(), "checkpoints": [str(p) for p in args.ckpt]}
    for path in emit(report, cfg.out, cfg.formats):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_fisher_stats(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _require(cfg, "ckpt")
    _require_dir(cfg.ckpt, "checkpoint")
    state = load_checkpoint(cfg.ckpt)
    if state.ewc is None:
        raise ConfigError(f"checkpoint {cfg.ckpt} has no Fisher diagonal")
    fisher = state.ewc.fisher_sum
    flat = fisher.flat()
    frac = important_fraction(fisher, cfg.threshold, cfg.normalize)
    print(f"iterations {state.ewc.iteration_count}")
    print(f"estimator {fisher.estimator}")
    print(f"samples {fisher.n_samples}")
    print(f"coordinates {flat.size}")
    print(f"max {flat.max():.6g}")
    print(f"mean {flat.mean():.6g}")
    print(f"important_fraction {frac:.6f} (threshold {cfg.threshold}, normalize {str(cfg.normalize).lower()})")
    return EXIT_OK


def cmd_grad_check(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if args.instances < 1:
        raise ConfigError("--instances must be >= 1")
    result = grad_check(cfg.seed, args.instances)
    for check, err in sorted(result.by_check.items()):
        print(f"{check} {err:.3e}")
    print(f"max_relative_error {result.max_rel_error:.3e} over {result.coordinates} coordinates")
    return EXIT_OK if result.passed(args.tol) else EXIT_RUNTIME


def cmd_bench(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    from .bench import BenchConfig, run_bench

    _require(cfg, "out")
    _check_writable(cfg.out)
    strategies = tuple(_parse_list(args.strategies)) if args.strategies else tuple(STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    if len(cfg.tasks_per_group) < 2:
        raise ConfigError("bench needs at least two task groups")
    bench_cfg = BenchConfig(
        seeds=cfg.seeds, tasks_per_group=cfg.tasks_per_group, strategies=strategies,
        joint_baseline=not args.no_joint, threshold=cfg.threshold, gen=cfg.gen, plan=cfg.plan, model=cfg.model,
    )
    _, summary = run_bench(bench_cfg, cfg.out, cfg.formats)
    print(json.dumps(
        {k: summary[k] for k in ("mean_old_group_degradation", "mean_new_group_error", "mean_joint_new_error") if k in summary},
        indent=2, sort_keys=True,
    ))
    print(f"wrote {cfg.out}")
    return EXIT_OK


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "train-initial": cmd_train_initial,
    "continue": cmd_continue,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "fisher-stats": cmd_fisher_stats,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _configure_logging()
        cfg = resolve(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"clwf: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ClwfError, OSError, ValueError, FloatingPointError) as exc:
        print(f"clwf: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
