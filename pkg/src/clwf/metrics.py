"""Error rates, forgetting statistics and report emission."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ClwfError, ContractError, UndefinedRateError
from .model import ToyEncoderClassifier
from .tasks import TaskSuite

CSV_COLUMNS = ("iteration", "strategy", "task_id", "group", "split", "error_rate", "n_samples")


@dataclass(frozen=True)
class EvalRow:
    iteration: int
    strategy: str
    task_id: str
    group: int
    split: str
    error_rate: float
    n_samples: int


def evaluate(model: ToyEncoderClassifier, suite: TaskSuite, task: str, split: str = "test") -> float:
    """Fraction of misclassified samples of ``task``'s ``split``."""
    ds = suite.dataset(task, split)
    wrong = 0
    for start in range(0, len(ds), 1024):
        pred = model.predict(ds.x[start : start + 1024], task)
        wrong += int(np.count_nonzero(pred != ds.y[start : start + 1024]))
    return wrong / len(ds)


def degradation(old_err: float, new_err: float) -> float:
    """Relative error increase ``(new - old) / old``."""
    if old_err <= 0:
        raise UndefinedRateError(
            f"degradation undefined for a zero baseline (absolute change {new_err - old_err:+.6g})",
            new_err - old_err,
        )
    return (new_err - old_err) / old_err


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    importance: list[dict[str, Any]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def add(self, row: EvalRow) -> None:
        if not 0.0 <= row.error_rate <= 1.0:
            raise ContractError(f"error rate {row.error_rate} outside [0, 1]")
        key = (row.iteration, row.strategy, row.task_id, row.split)
        if any((r.iteration, r.strategy, r.task_id, r.split) == key for r in self.rows):
            raise ContractError(f"duplicate evaluation {key}")
        self.rows.append(row)

    def add_importance(self, iteration: int, strategy: str, threshold: float, normalize: bool, fraction: float) -> None:
        self.importance.append(
            {"iteration": iteration, "strategy": strategy, "threshold": threshold, "normalize": normalize, "fraction": fraction}
        )

    def strategies(self) -> list[str]:
        return list(dict.fromkeys(r.strategy for r in self.rows))

    def iterations(self, strategy: str | None = None) -> list[int]:
        return sorted({r.iteration for r in self.rows if strategy is None or r.strategy == strategy})

    def groups(self, iteration: int, strategy: str) -> list[int]:
        return sorted({r.group for r in self.rows if r.iteration == iteration and r.strategy == strategy})

    def select(self, *, iteration: int | None = None, strategy: str | None = None, group: int | None = None,
               split: str | None = None) -> list[EvalRow]:
        return [
            r for r in self.rows
            if (iteration is None or r.iteration == iteration)
            and (strategy is None or r.strategy == strategy)
            and (group is None or r.group == group)
            and (split is None or r.split == split)
        ]

    def group_average(self, iteration: int, group: int, strategy: str | None = None, split: str = "test") -> float:
        return group_average(self, iteration, group, strategy, split)

    def degradation_table(self, split: str = "test") -> list[dict[str, Any]]:
        """Per strategy, iteration and previously seen group: change of the group average
        relative to the previous iteration and to the group's first evaluation."""
        out = []
        for strategy in self.strategies():
            its = self.iterations(strategy)
            for prev, cur in zip(its, its[1:]):
                for g in self.groups(prev, strategy):
                    if g not in self.groups(cur, strategy):
                        continue
                    first = min(i for i in its if g in self.groups(i, strategy))
                    old = self.group_average(prev, g, strategy, split)
                    new = self.group_average(cur, g, strategy, split)
                    base = self.group_average(first, g, strategy, split)
                    out.append(
                        {
                            "strategy": strategy,
                            "iteration": cur,
                            "group": g,
                            "rate_vs_previous": _safe_rate(old, new),
                            "rate_vs_first": _safe_rate(base, new),
                        }
                    )
        return out

    def to_json(self) -> dict[str, Any]:
        groups = []
        for strategy in self.strategies():
            for it in self.iterations(strategy):
                avgs = {str(g): self.group_average(it, g, strategy) for g in self.groups(it, strategy)}
                groups.append(
                    {
                        "strategy": strategy,
                        "iteration": it,
                        "group_averages": avgs,
                        "group_averages_pct": {g: f"{100 * v:.2f}%" for g, v in avgs.items()},
                    }
                )
        return {
            "columns": list(CSV_COLUMNS),
            "rows": [asdict(r) for r in self.rows],
            "groups": groups,
            "degradation": self.degradation_table(),
            "importance": list(self.importance),
            "meta": self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.iteration, r.strategy, r.task_id, r.group, r.split, repr(float(r.error_rate)), r.n_samples])
        return buf.getvalue()


def _safe_rate(old: float, new: float) -> float | None:
    try:
        return degradation(old, new)
    except UndefinedRateError:
        return None


def group_average(report: EvalReport, iteration: int, group: int, strategy: str | None = None, split: str = "test") -> float:
    """Unweighted mean error over the group's tasks at ``iteration``."""
    errs = [r.error_rate for r in report.select(iteration=iteration, strategy=strategy, group=group, split=split)]
    if not errs:
        raise ContractError(f"no evaluated tasks for group {group} at iteration {iteration}")
    return float(np.mean(errs))


def evaluate_into(
    report: EvalReport,
    model: ToyEncoderClassifier,
    suite: TaskSuite,
    iteration: int,
    strategy: str,
    tasks: Iterable[str] | None = None,
    split: str = "test",
) -> None:
    for task in model.tasks if tasks is None else tasks:
        ds = suite.dataset(task, split)
        report.add(
            EvalRow(iteration, strategy, task, suite.task(task).group, split, evaluate(model, suite, task, split), len(ds))
        )


def parse_csv(text: str) -> list[EvalRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ContractError(f"unexpected CSV columns {header}")
    return [EvalRow(int(i), s, t, int(g), sp, float(e), int(n)) for i, s, t, g, sp, e, n in reader]


def emit(report: EvalReport, out_dir: str | Path, formats: Iterable[str] = ("csv", "json")) -> list[Path]:
    """Write ``report.csv`` / ``report.json``; output is byte-stable for equal reports."""
    formats = list(formats)
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise ContractError(f"unknown report formats {sorted(unknown)}")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            path = out / "report.csv"
            path.write_text(report.to_csv(), encoding="utf-8")
            written.append(path)
        if "json" in formats:
            path = out / "report.json"
            path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
            written.append(path)
    except OSError as exc:
        raise ClwfError(f"cannot write report under {out}: {exc}") from exc
    return written
