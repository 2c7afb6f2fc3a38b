import json

import numpy as np
import pytest

from clwf.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from clwf.errors import CheckpointError
from clwf.model import ModelConfig
from clwf.tasks import GenConfig, generate_suite
from clwf.trainer import Strategy, TrainPlan, finish_iteration, run_steps, start_continual, start_initial, train_initial

GEN = GenConfig(d_in=8, n_train=64, n_dev=32, n_test=32)
MODEL = ModelConfig(d_in=8, d_model=12, n_blocks=1, n_classes=10, k=2)
PLAN = TrainPlan(
    steps_initial=40, steps_per_iteration=30, batch_size=8, warmup_steps=10, checkpoint_every=10,
    average_last_n=3, fisher_max_samples=16, seed=5,
)


@pytest.fixture(scope="module")
def suite():
    return generate_suite(2, [2, 1], 4, GEN)


@pytest.fixture(scope="module")
def initial(suite):
    return train_initial(suite, PLAN, MODEL)


def test_round_trip_restores_state(tmp_path, initial):
    save_checkpoint(initial, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.iteration == initial.iteration
    assert back.model.tasks == initial.model.tasks
    for name, t in initial.model.named_parameters().items():
        assert np.array_equal(back.model.named_parameters()[name].data, t.data.astype(np.float32))
    for name, v in initial.ewc.fisher_sum.values.items():
        assert np.array_equal(back.ewc.fisher_sum.values[name], v.astype(np.float32))
    assert back.ewc.schedule == initial.ewc.schedule


def test_same_inputs_same_hash(tmp_path, initial, suite):
    a = save_checkpoint(initial, tmp_path / "a")
    b = save_checkpoint(train_initial(suite, PLAN, MODEL), tmp_path / "b")
    assert a == b == checkpoint_hash(tmp_path / "a")
    c = save_checkpoint(train_initial(suite, TrainPlan(**{**PLAN.to_dict(), "seed": 6}), MODEL), tmp_path / "c")
    assert c != a


def test_manifest_accounts_for_every_byte(tmp_path, initial):
    save_checkpoint(initial, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    per_file: dict[str, list[tuple[int, int]]] = {}
    for name, entry in manifest["tensors"].items():
        assert entry["dtype"] == "f32"
        assert entry["length"] == 4 * int(np.prod(entry["shape"]))
        per_file.setdefault(entry["file"], []).append((entry["offset"], entry["length"]))
    for fname, spans in per_file.items():
        spans.sort()
        pos = 0
        for off, length in spans:
            assert off == pos
            pos += length
        assert pos == (tmp_path / fname).stat().st_size
    factor_keys = [k for k, e in manifest["tensors"].items() if "/task/" in k and e["file"] == "params.bin"]
    assert factor_keys and all(k.rsplit("/", 2)[-2] in ("r_m", "v_m", "r_b", "v_b") for k in factor_keys)


def test_resume_matches_uninterrupted_training(tmp_path, initial, suite):
    new_tasks = suite.groups()[1]
    straight = start_continual(initial, new_tasks, Strategy.WF_EWC)
    run_steps(straight, suite, 12)
    save_checkpoint(straight, tmp_path)
    resumed = load_checkpoint(tmp_path)
    run_steps(straight, suite, 1)
    run_steps(resumed, suite, 1)
    for name, t in straight.model.named_parameters().items():
        assert np.max(np.abs(resumed.model.named_parameters()[name].data - t.data)) <= 1e-6
    run_steps(straight, suite)
    run_steps(resumed, suite)
    finish_iteration(straight, suite)
    finish_iteration(resumed, suite)
    assert straight.iteration == resumed.iteration


def test_resume_mid_initial_iteration(tmp_path, suite):
    state = start_initial(suite, PLAN, MODEL)
    run_steps(state, suite, 15)
    save_checkpoint(state, tmp_path)
    resumed = load_checkpoint(tmp_path)
    assert resumed.local_step == 15 and resumed.strategy is None
    assert len(resumed.snapshots) == len(state.snapshots)
    run_steps(state, suite, 1)
    run_steps(resumed, suite, 1)
    for name, t in state.model.named_parameters().items():
        assert np.max(np.abs(resumed.model.named_parameters()[name].data - t.data)) <= 1e-6


def test_missing_factor_names_the_task(tmp_path, initial):
    save_checkpoint(initial, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    table = manifest["tensors"]
    victim = next(k for k, e in table.items() if k.startswith("block0/task/lang01/") and e["file"] == "params.bin")
    gone = table.pop(victim)
    # cut the tensor's bytes out so the remaining table is self-consistent
    raw = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(raw[: gone["offset"]] + raw[gone["offset"] + gone["length"] :])
    for entry in table.values():
        if entry["file"] == "params.bin" and entry["offset"] > gone["offset"]:
            entry["offset"] -= gone["length"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="lang01"):
        load_checkpoint(tmp_path)


def test_version_mismatch_and_truncation(tmp_path, initial):
    save_checkpoint(initial, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path)

    save_checkpoint(initial, tmp_path)
    raw = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    (tmp_path / "params.bin").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
