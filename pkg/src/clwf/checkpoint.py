"""Directory checkpoint container.

Layout::

    manifest.json   format version, tensor table, task registry, counters, plan echo
    params.bin      model parameters
    ewc.bin         ewc/fisher/<param>, ewc/anchor/<param>          (optional)
    adam.bin        adam/m/<param>, adam/v/<param>                   (optional)
    snapshots.bin   snap/<j>/<param>, in-iteration averaging pool     (optional)

Every ``.bin`` file is raw little-endian float32 concatenated in manifest
order.  Factor sets are stored one vector per entry as
``<layer>/task/<id>/<role>/<i>``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError
from .ewc import EwcSchedule, EwcState, FisherDiagonal
from .factorized import FACTOR_ROLES
from .model import ModelConfig, ToyEncoderClassifier
from .trainer import AdamState, Snapshot, Strategy, TrainPlan, TrainState

FORMAT_VERSION = 1
BIN_FILES = ("params.bin", "ewc.bin", "adam.bin", "snapshots.bin")


def _model_tensors(model: ToyEncoderClassifier) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.shared_parameters().items()]
    for task, factorized in model.tasks.items():
        if not factorized:
            continue
        for layer in model.factorized_layers():
            fs = layer.factors[task]
            for role in FACTOR_ROLES:
                mat = getattr(fs, role).data
                for i in range(mat.shape[0]):
                    out.append((f"{layer.name}/task/{task}/{role}/{i}", mat[i]))
    return out


def _state_tensors(state: TrainState) -> dict[str, list[tuple[str, np.ndarray]]]:
    files: dict[str, list[tuple[str, np.ndarray]]] = {"params.bin": _model_tensors(state.model)}
    if state.ewc is not None:
        files["ewc.bin"] = [(f"ewc/fisher/{n}", v) for n, v in state.ewc.fisher_sum.values.items()] + [
            (f"ewc/anchor/{n}", v) for n, v in state.ewc.anchor.items()
        ]
    if state.adam.m:
        files["adam.bin"] = [(f"adam/m/{n}", v) for n, v in state.adam.m.items()] + [
            (f"adam/v/{n}", v) for n, v in state.adam.v.items()
        ]
    if state.snapshots:
        files["snapshots.bin"] = [
            (f"snap/{j}/{n}", v) for j, snap in enumerate(state.snapshots) for n, v in snap.params.items()
        ]
    return files


def save_checkpoint(state: TrainState, out_dir: str | Path) -> str:
    """Write ``state`` under ``out_dir``; returns the checkpoint hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, dict[str, Any]] = {}
    for fname in BIN_FILES:
        (out / fname).unlink(missing_ok=True)
    for fname, entries in _state_tensors(state).items():
        chunks = []
        offset = 0
        for name, arr in entries:
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            if name in tensors:
                raise CheckpointError(f"tensor {name!r} listed twice")
            tensors[name] = {"file": fname, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        (out / fname).write_bytes(b"".join(chunks))
    ewc_meta = None
    if state.ewc is not None:
        sched = state.ewc.schedule
        ewc_meta = {
            "estimator": state.ewc.fisher_sum.estimator,
            "n_samples": state.ewc.fisher_sum.n_samples,
            "iteration_count": state.ewc.iteration_count,
            "schedule": {"lambda0": sched.lambda0, "decay_factor": sched.decay_factor, "decay_interval": sched.decay_interval},
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": state.model.cfg.to_dict(),
        "tasks": [{"task_id": t, "factorized": f} for t, f in state.model.tasks.items()],
        "plan": state.plan.to_dict(),
        "iteration": state.iteration,
        "step": state.step,
        "local_step": state.local_step,
        "steps_target": state.steps_target,
        "strategy": state.strategy.value if state.strategy else None,
        "active_tasks": state.active_tasks,
        "trainable": state.trainable,
        "rng": {"kind": "counter-derived", "seed": state.plan.seed, "iteration": state.iteration, "local_step": state.local_step},
        "ewc": ewc_meta,
        "adam_t": state.adam.t,
        "snapshots": [{"step": s.step, "score": s.score, "params": list(s.params)} for s in state.snapshots],
        "history": state.history,
        "tensors": tensors,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return checkpoint_hash(out)


def checkpoint_hash(ckpt_dir: str | Path) -> str:
    root = Path(ckpt_dir)
    h = hashlib.sha256()
    for fname in ("manifest.json", *BIN_FILES):
        path = root / fname
        if path.exists():
            h.update(fname.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def _read_tensors(root: Path, manifest: dict[str, Any]) -> dict[str, np.ndarray]:
    table = manifest.get("tensors")
    if not isinstance(table, dict):
        raise CheckpointError("manifest has no tensor table")
    blobs: dict[str, bytes] = {}
    used: dict[str, int] = {}
    out = {}
    for name, entry in table.items():
        fname = entry["file"]
        if fname not in blobs:
            path = root / fname
            if not path.exists():
                raise CheckpointError(f"manifest references missing payload {fname}")
            blobs[fname] = path.read_bytes()
            used[fname] = 0
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        off, length = int(entry["offset"]), int(entry["length"])
        if length != 4 * n or off + length > len(blobs[fname]):
            raise CheckpointError(f"{name}: manifest entry inconsistent with {fname}")
        out[name] = np.frombuffer(blobs[fname], dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        used[fname] += length
    for fname, total in used.items():
        if total != len(blobs[fname]):
            raise CheckpointError(f"{fname}: {len(blobs[fname])} bytes on disk, manifest accounts for {total}")
    return out


def load_checkpoint(ckpt_dir: str | Path) -> TrainState:
    root = Path(ckpt_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{root}: unreadable manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    arrays = _read_tensors(root, manifest)
    plan = TrainPlan(**manifest["plan"])
    model = ToyEncoderClassifier(ModelConfig(**manifest["model"]), seed=0)
    for entry in manifest["tasks"]:
        model.add_language(entry["task_id"], 0.0, np.random.default_rng(0), factorized=entry["factorized"])

    values: dict[str, np.ndarray] = {}
    for name in model.shared_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing shared parameter {name!r}")
        values[name] = arrays[name]
    for task, factorized in model.tasks.items():
        if not factorized:
            continue
        for layer in model.factorized_layers():
            for role in FACTOR_ROLES:
                rows = []
                for i in range(layer.k):
                    key = f"{layer.name}/task/{task}/{role}/{i}"
                    if key not in arrays:
                        raise CheckpointError(f"checkpoint is missing factor tensors for task {task!r} ({key})")
                    rows.append(arrays[key])
                values[f"{layer.name}/task/{task}/{role}"] = np.stack(rows)
    model.load_arrays(values)
    model.set_trainable(set(manifest["trainable"]))

    ewc = None
    if manifest.get("ewc"):
        meta = manifest["ewc"]
        names = list(model.shared_parameters())
        try:
            fisher = {n: arrays[f"ewc/fisher/{n}"] for n in names}
            anchor = {n: arrays[f"ewc/anchor/{n}"] for n in names}
        except KeyError as exc:
            raise CheckpointError(f"EWC payload is missing {exc.args[0]}") from None
        ewc = EwcState(
            FisherDiagonal(fisher, meta["n_samples"], meta["estimator"]),
            anchor,
            EwcSchedule(**meta["schedule"]),
            meta["iteration_count"],
        )
    adam = AdamState()
    for name, t in manifest.get("adam_t", {}).items():
        try:
            adam.m[name] = arrays[f"adam/m/{name}"]
            adam.v[name] = arrays[f"adam/v/{name}"]
        except KeyError as exc:
            raise CheckpointError(f"optimizer payload is missing {exc.args[0]}") from None
        adam.t[name] = int(t)
    snapshots = []
    for j, meta in enumerate(manifest.get("snapshots", [])):
        try:
            params = {n: arrays[f"snap/{j}/{n}"] for n in meta["params"]}
        except KeyError as exc:
            raise CheckpointError(f"snapshot payload is missing {exc.args[0]}") from None
        snapshots.append(Snapshot(meta["step"], meta["score"], params))
    return TrainState(
        model=model,
        plan=plan,
        adam=adam,
        ewc=ewc,
        iteration=manifest["iteration"],
        step=manifest["step"],
        local_step=manifest["local_step"],
        steps_target=manifest["steps_target"],
        strategy=Strategy(manifest["strategy"]) if manifest["strategy"] else None,
        active_tasks=list(manifest["active_tasks"]),
        trainable=list(manifest["trainable"]),
        snapshots=snapshots,
        history=list(manifest.get("history", [])),
    )
