import json

import numpy as np
import pytest

from clwf.errors import ClwfError, ContractError, UndefinedRateError
from clwf.metrics import CSV_COLUMNS, EvalReport, EvalRow, degradation, emit, evaluate, group_average, parse_csv
from clwf.model import ModelConfig, ToyEncoderClassifier
from clwf.tasks import Dataset, GenConfig, generate_suite


def _row(it, strategy, task, group, err, split="test", n=100):
    return EvalRow(it, strategy, task, group, split, err, n)


def _report(iterations=2, strategies=("vanilla", "wf_ewc")):
    rng = np.random.default_rng(0)
    report = EvalReport()
    for s in strategies:
        for it in range(iterations):
            for g in range(it + 1):
                for t in range(2):
                    report.add(_row(it, s, f"t{g}{t}", g, float(rng.uniform(0.05, 0.5))))
        report.add_importance(0, s, 0.25, True, 0.4)
    return report


def test_degradation_examples():
    assert degradation(7.7, 8.1) == pytest.approx(0.0519, abs=5e-5)
    assert degradation(7.7, 8.4) == pytest.approx(0.0909, abs=5e-5)
    assert degradation(0.3, 0.3) == 0.0
    with pytest.raises(UndefinedRateError) as info:
        degradation(0.0, 0.02)
    assert info.value.absolute_change == pytest.approx(0.02)


def test_group_average_examples():
    report = EvalReport()
    report.add(_row(0, "s", "a", 0, 0.2))
    assert group_average(report, 0, 0) == 0.2
    report.add(_row(0, "s", "b", 0, 0.4))
    assert group_average(report, 0, 0) == pytest.approx(0.3)
    flipped = EvalReport()
    flipped.add(_row(0, "s", "b", 0, 0.4))
    flipped.add(_row(0, "s", "a", 0, 0.2))
    assert group_average(flipped, 0, 0) == group_average(report, 0, 0)
    with pytest.raises(ContractError):
        group_average(report, 0, 5)


def test_report_invariants():
    report = EvalReport()
    with pytest.raises(ContractError):
        report.add(_row(0, "s", "a", 0, 1.5))
    report.add(_row(0, "s", "a", 0, 0.5))
    with pytest.raises(ContractError):
        report.add(_row(0, "s", "a", 0, 0.4))
    report.add(_row(0, "s", "a", 0, 0.4, split="dev"))


def test_evaluate_counts_mistakes():
    suite = generate_suite(1, [1], 0, GenConfig(d_in=4, n_train=10, n_dev=10, n_test=10))
    model = ToyEncoderClassifier(ModelConfig(d_in=4, d_model=4, n_blocks=1, n_classes=10, k=1))
    model.add_language("lang00", 0.0)
    model.out_w.data[...] = 0.0
    model.out_b.data[:] = 0.0
    model.out_b.data[3] = 1.0  # always predicts class 3
    ds = suite.dataset("lang00", "test")
    y = np.full(10, 3, dtype=np.uint16)
    suite.attach(Dataset("lang00", "test", 0, ds.x, y, 10))
    assert evaluate(model, suite, "lang00") == 0.0
    y[:3] = 1
    assert evaluate(model, suite, "lang00") == pytest.approx(0.3)
    assert evaluate(model, suite, "lang00") == evaluate(model, suite, "lang00")


def test_csv_round_trip_and_column_order(tmp_path):
    report = _report()
    emit(report, tmp_path, ["csv"])
    text = (tmp_path / "report.csv").read_text()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    rows = parse_csv(text)
    assert rows == report.rows
    rebuilt = EvalReport(rows)
    for s in report.strategies():
        for it in report.iterations(s):
            for g in report.groups(it, s):
                assert abs(rebuilt.group_average(it, g, s) - report.group_average(it, g, s)) <= 1e-12


def test_emission_is_byte_stable(tmp_path):
    emit(_report(), tmp_path / "a")
    emit(_report(), tmp_path / "b")
    for name in ("report.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_json_groups_count_and_percent_formatting(tmp_path):
    strategies = ("vanilla", "ewc", "wf_frozen", "wf_finetune", "wf_ewc")
    report = _report(iterations=4, strategies=strategies)
    emit(report, tmp_path, ["json"])
    data = json.loads((tmp_path / "report.json").read_text())
    assert len(data["groups"]) == 20
    entry = data["groups"][0]
    value = entry["group_averages"]["0"]
    assert entry["group_averages_pct"]["0"] == f"{100 * value:.2f}%"
    assert data["importance"][0] == {"iteration": 0, "strategy": "vanilla", "threshold": 0.25, "normalize": True,
                                     "fraction": 0.4}


def test_degradation_table_for_frozen_rows_is_zero():
    report = EvalReport()
    for it in (0, 1):
        report.add(_row(it, "wf_frozen", "a", 0, 0.2))
        report.add(_row(it, "wf_frozen", "b", 0, 0.3))
    report.add(_row(1, "wf_frozen", "c", 1, 0.25))
    table = report.degradation_table()
    assert table == [{"strategy": "wf_frozen", "iteration": 1, "group": 0, "rate_vs_previous": 0.0, "rate_vs_first": 0.0}]


def test_emit_rejects_unknown_format_and_reports_io_errors(tmp_path):
    with pytest.raises(ContractError):
        emit(_report(), tmp_path, ["xml"])
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ClwfError, match="file"):
        emit(_report(), blocker / "sub")
