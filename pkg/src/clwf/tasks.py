"""Seeded synthetic "language" tasks.

Every task in a suite shares a ground-truth generator ``(A, B)``: a latent
vector ``z ~ N(0, I)`` has clean label ``argmax(B tanh(A z))``.  A task then
applies its own orthogonal rotation ``Q_t`` to the frames and its own label
permutation ``pi_t`` to the labels, and flips labels with probability
``noise_rho``.  Frames are ``z`` repeated ``L`` times plus zero-mean jitter.

Datasets serialize to a small binary container::

    b"CLWF1" | u32 LE header length | UTF-8 JSON header
    | n*L*d_in float32 LE features | n uint16 LE labels
"""

from __future__ import annotations

import json
import struct
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    BadMagicError,
    ContractError,
    LengthMismatchError,
    TruncatedError,
    UnknownTaskError,
)

MAGIC = b"CLWF1"
SPLITS = ("train", "dev", "test")
_SPLIT_TAG = {s: i for i, s in enumerate(SPLITS)}


@dataclass(frozen=True)
class GenConfig:
    d_in: int = 32
    d_latent: int = 4
    # std of A's entries is latent_scale / sqrt(d_in); larger is more nonlinear
    latent_scale: float = 0.5
    n_classes: int = 10
    seq_len: int = 8
    jitter_std: float = 0.1
    noise_rho: float = 0.05
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    # 0 keeps every task in the same frame; large values approach a Haar-random rotation
    rotation_strength: float = 0.3
    # random transpositions applied per task; None draws a full random permutation
    label_swaps: int | None = 2
    # task_id -> n_train, for emulating skewed data sizes
    n_train_override: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if min(self.d_in, self.d_latent, self.seq_len) < 1 or self.n_classes < 2:
            raise ContractError("degenerate generator dimensions")
        if self.n_classes > 65535:
            raise ContractError("labels are stored as uint16")
        if not 0.0 <= self.noise_rho < 0.5:
            raise ContractError("noise_rho must lie in [0, 0.5)")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ContractError("split sizes must be >= 1")
        if self.rotation_strength < 0 or self.jitter_std < 0 or self.latent_scale <= 0:
            raise ContractError("rotation_strength and jitter_std must be non-negative, latent_scale positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    seed: int
    rotation_seed: int
    label_perm: tuple[int, ...]
    noise_rho: float
    n_train: int
    n_dev: int
    n_test: int
    group: int

    def split_size(self, split: str) -> int:
        _check_split(split)
        return getattr(self, f"n_{split}")


@dataclass
class Dataset:
    task_id: str
    split: str
    seed: int
    x: np.ndarray  # float32 [n, L, d_in]
    y: np.ndarray  # uint16 [n]
    n_classes: int

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.x[i], int(self.y[i])

    def header(self) -> dict[str, Any]:
        n, seq_len, d_in = self.x.shape
        return {
            "task_id": self.task_id,
            "n": n,
            "L": seq_len,
            "d_in": d_in,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "split": self.split,
        }


def _check_split(split: str) -> None:
    if split not in _SPLIT_TAG:
        raise ContractError(f"unknown split {split!r}; expected one of {SPLITS}")


def _u64(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0])


def _rotation(d: int, strength: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = np.eye(d) + strength * rng.normal(size=(d, d)) / np.sqrt(d)
    q, r = np.linalg.qr(m)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


class TaskSuite:
    def __init__(self, shared_seed: int, cfg: GenConfig, tasks: list[TaskSpec]):
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ContractError("task ids must be unique")
        self.shared_seed = shared_seed
        self.cfg = cfg
        self.tasks = tasks
        rng = np.random.default_rng([shared_seed, 0])
        self.A = rng.normal(0.0, cfg.latent_scale / np.sqrt(cfg.d_in), size=(cfg.d_latent, cfg.d_in))
        self.B = rng.normal(0.0, 1.0, size=(cfg.n_classes, cfg.d_latent))
        self._by_id = {t.task_id: t for t in tasks}
        self._rot: dict[str, np.ndarray] = {}
        self._data: dict[tuple[str, str], Dataset] = {}

    @property
    def n_groups(self) -> int:
        return max(t.group for t in self.tasks) + 1 if self.tasks else 0

    def groups(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.n_groups)]
        for t in self.tasks:
            out[t.group].append(t.task_id)
        return out

    def task(self, task_id: str) -> TaskSpec:
        try:
            return self._by_id[task_id]
        except KeyError:
            raise UnknownTaskError(f"task {task_id!r} is not in the suite") from None

    def rotation(self, task_id: str) -> np.ndarray:
        if task_id not in self._rot:
            spec = self.task(task_id)
            self._rot[task_id] = _rotation(self.cfg.d_in, self.cfg.rotation_strength, spec.rotation_seed)
        return self._rot[task_id]

    def clean_labels(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(np.tanh(z @ self.A.T) @ self.B.T, axis=1)

    def dataset(self, task_id: str, split: str) -> Dataset:
        _check_split(split)
        key = (task_id, split)
        if key not in self._data:
            self._data[key] = self._generate(self.task(task_id), split)
        return self._data[key]

    def attach(self, ds: Dataset) -> None:
        """Use a pre-loaded dataset (e.g. read from disk) instead of generating it."""
        self.task(ds.task_id)
        _check_split(ds.split)
        self._data[(ds.task_id, ds.split)] = ds

    def _generate(self, spec: TaskSpec, split: str) -> Dataset:
        cfg = self.cfg
        n = spec.split_size(split)
        seed = _u64(spec.seed, _SPLIT_TAG[split])
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, cfg.d_in))
        jitter = rng.normal(0.0, cfg.jitter_std, size=(n, cfg.seq_len, cfg.d_in))
        # centred so the frame mean is exactly z
        jitter -= jitter.mean(axis=1, keepdims=True)
        frames = (z[:, None, :] + jitter) @ self.rotation(spec.task_id).T
        perm = np.asarray(spec.label_perm)
        y = perm[self.clean_labels(z)]
        flip = rng.random(n) < spec.noise_rho
        shift = rng.integers(1, cfg.n_classes, size=n)
        y = np.where(flip, (y + shift) % cfg.n_classes, y)
        return Dataset(spec.task_id, split, seed, frames.astype(np.float32), y.astype(np.uint16), cfg.n_classes)

    def oracle_predict(self, task_id: str, x: np.ndarray) -> np.ndarray:
        """Noise-free label from the generator itself (de-rotate, pool, argmax, permute)."""
        z = np.asarray(x, dtype=np.float64).mean(axis=1) @ self.rotation(task_id)
        return np.asarray(self.task(task_id).label_perm)[self.clean_labels(z)]

    def batches(self, task_id: str, split: str, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iterate_batches(self.dataset(task_id, split), batch_size, epoch_seed)

    # ------------------------------------------------------------------ persistence

    def describe(self) -> dict[str, Any]:
        return {
            "shared_seed": self.shared_seed,
            "gen": self.cfg.to_dict(),
            "tasks": [asdict(t) for t in self.tasks],
        }

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "suite.json").write_text(json.dumps(self.describe(), indent=2, sort_keys=True) + "\n")
        for t in self.tasks:
            for split in SPLITS:
                save_task(self.dataset(t.task_id, split), out / f"{t.task_id}.{split}.clwf")

    @classmethod
    def load(cls, data_dir: str | Path) -> TaskSuite:
        root = Path(data_dir)
        meta = json.loads((root / "suite.json").read_text())
        gen = dict(meta["gen"])
        cfg = GenConfig(**gen)
        tasks = [TaskSpec(**{**t, "label_perm": tuple(t["label_perm"])}) for t in meta["tasks"]]
        suite = cls(meta["shared_seed"], cfg, tasks)
        for t in tasks:
            for split in SPLITS:
                path = root / f"{t.task_id}.{split}.clwf"
                if path.exists():
                    suite.attach(load_task(path))
        return suite


def generate_suite(
    n_groups: int,
    tasks_per_group: Sequence[int],
    master_seed: int,
    gen_cfg: GenConfig | None = None,
) -> TaskSuite:
    """Build a reproducible suite; group ``g`` holds ``tasks_per_group[g]`` tasks."""
    cfg = gen_cfg or GenConfig()
    if n_groups < 1 or len(tasks_per_group) != n_groups or min(tasks_per_group) < 1:
        raise ContractError("need n_groups >= 1 and one positive task count per group")
    specs: list[TaskSpec] = []
    idx = 0
    for group, count in enumerate(tasks_per_group):
        for _ in range(count):
            task_id = f"lang{idx:02d}"
            perm_rng = np.random.default_rng(_u64(master_seed, 3, idx))
            if cfg.label_swaps is None:
                perm = perm_rng.permutation(cfg.n_classes)
            else:
                perm = np.arange(cfg.n_classes)
                for _ in range(cfg.label_swaps):
                    i, j = perm_rng.choice(cfg.n_classes, size=2, replace=False)
                    perm[[i, j]] = perm[[j, i]]
            specs.append(
                TaskSpec(
                    task_id=task_id,
                    seed=_u64(master_seed, 1, idx),
                    rotation_seed=_u64(master_seed, 2, idx),
                    label_perm=tuple(int(p) for p in perm),
                    noise_rho=cfg.noise_rho,
                    n_train=cfg.n_train_override.get(task_id, cfg.n_train),
                    n_dev=cfg.n_dev,
                    n_test=cfg.n_test,
                    group=group,
                )
            )
            idx += 1
    return TaskSuite(master_seed, cfg, specs)


def iterate_batches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch over ``ds`` in a seeded shuffled order; the last batch may be short."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.x[idx], ds.y[idx]


def save_task(ds: Dataset, path: str | Path) -> None:
    header = json.dumps(ds.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = (
        MAGIC
        + struct.pack("<I", len(header))
        + header
        + np.ascontiguousarray(ds.x, dtype="<f4").tobytes()
        + np.ascontiguousarray(ds.y, dtype="<u2").tobytes()
    )
    Path(path).write_bytes(payload)


def load_task(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a CLWF1 dataset (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise TruncatedError(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        n, seq_len, d_in = int(header["n"]), int(header["L"]), int(header["d_in"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LengthMismatchError(f"{path}: unreadable header ({exc})") from None
    pos += hlen
    n_feat = n * seq_len * d_in
    expected = pos + 4 * n_feat + 2 * n
    if len(raw) < expected:
        raise TruncatedError(f"{path}: payload has {len(raw) - pos} bytes, header implies {expected - pos}")
    if len(raw) > expected:
        raise LengthMismatchError(f"{path}: {len(raw) - expected} trailing bytes beyond header-declared payload")
    x = np.frombuffer(raw, dtype="<f4", count=n_feat, offset=pos).reshape(n, seq_len, d_in).astype(np.float32)
    y = np.frombuffer(raw, dtype="<u2", count=n, offset=pos + 4 * n_feat).astype(np.uint16)
    return Dataset(header["task_id"], header["split"], int(header["seed"]), x, y, int(header["n_classes"]))
