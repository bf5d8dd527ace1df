"""Unstructured magnitude pruning, lottery-ticket IMP and ticket transfer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._binio import FormatError, Writer, atomic_write_bytes, atomic_write_text, open_sealed
from .datasets import TaskData
from .models import ModelSpec, ParamStore, evaluate, load_checkpoint, save_checkpoint
from .seeding import derive_seed, rng
from .training import TrainConfig, TrainResult, train

FMSK_MAGIC = b"FMSK"
FMSK_VERSION = b"1"


class MaskError(ValueError):
    pass


def target_count(target: float, prunable_count: int) -> int:
    """Elements to prune for ``target`` sparsity, rounding half away from zero."""
    return int(math.floor(target * prunable_count + 0.5))


class Mask:
    """Binary keep-flags (1 = kept) for every prunable tensor of one ModelSpec."""

    def __init__(self, spec: ModelSpec, bits: Mapping[str, np.ndarray]) -> None:
        self.spec = spec
        layout = ParamStore(spec)
        names = layout.prunable_names
        if list(bits) != names:
            raise MaskError(f"mask tensors {list(bits)} do not match prunable set {names}")
        self.bits: dict[str, np.ndarray] = {}
        for name in names:
            b = np.asarray(bits[name])
            if b.shape != layout.shape(name):
                raise MaskError(f"mask {name} has shape {b.shape}, expected {layout.shape(name)}")
            if not np.isin(b, (0, 1)).all():
                raise MaskError(f"mask {name} has values outside {{0, 1}}")
            self.bits[name] = b.astype(np.uint8)
        self._layout = layout

    @classmethod
    def ones(cls, spec_or_params: ModelSpec | ParamStore) -> "Mask":
        spec = spec_or_params.spec if isinstance(spec_or_params, ParamStore) else spec_or_params
        layout = ParamStore(spec)
        return cls(spec, {n: np.ones(layout.shape(n), np.uint8) for n in layout.prunable_names})

    @classmethod
    def from_vector(cls, spec: ModelSpec, keep: np.ndarray) -> "Mask":
        """Inverse of :meth:`prunable_vector`."""
        layout = ParamStore(spec)
        out, off = {}, 0
        for n in layout.prunable_names:
            size = int(np.prod(layout.shape(n)))
            out[n] = keep[off:off + size].reshape(layout.shape(n))
            off += size
        return cls(spec, out)

    @property
    def names(self) -> list[str]:
        return list(self.bits)

    @property
    def prunable_count(self) -> int:
        return self._layout.prunable_count

    @property
    def zero_count(self) -> int:
        return int(sum(b.size - int(b.sum()) for b in self.bits.values()))

    @property
    def sparsity(self) -> float:
        return self.zero_count / self.prunable_count

    def prunable_vector(self) -> np.ndarray:
        """Concatenated keep-flags over prunable tensors in registry order."""
        return np.concatenate([b.reshape(-1) for b in self.bits.values()])

    def keep_vector(self) -> np.ndarray:
        """Keep-flags over the full flat parameter buffer (non-prunables kept)."""
        keep = np.ones(self._layout.size, dtype=np.uint8)
        for name, b in self.bits.items():
            keep[self._layout.slice(name)] = b.reshape(-1)
        return keep

    def pruned_positions(self) -> np.ndarray:
        return np.flatnonzero(self.prunable_vector() == 0)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Mask) and self.spec == other.spec
                and all(np.array_equal(self.bits[n], other.bits[n]) for n in self.bits))

    def __repr__(self) -> str:
        return f"Mask(sparsity={self.sparsity:.4f}, prunable={self.prunable_count})"

    # .fmsk
    def to_bytes(self) -> bytes:
        w = Writer(FMSK_MAGIC + FMSK_VERSION)
        w.u64(self.prunable_count)
        w.string(self.spec.to_json())
        w.u32(len(self.bits))
        for name, b in self.bits.items():
            w.string(name)
            w.shape(b.shape)
            w.raw(np.packbits(b.reshape(-1)).tobytes())
        return w.sealed()

    @classmethod
    def from_bytes(cls, raw: bytes, what: str = "mask") -> "Mask":
        r = open_sealed(raw, FMSK_MAGIC, FMSK_VERSION, what)
        count = r.u64()
        spec = ModelSpec.from_dict(json.loads(r.string()))
        bits = {}
        for _ in range(r.u32()):
            name = r.string()
            shape = r.shape()
            n = int(np.prod(shape, dtype=np.int64))
            packed = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
            bits[name] = np.unpackbits(packed)[:n].reshape(shape)
        if not r.done():
            raise FormatError(f"{what}: trailing bytes")
        mask = cls(spec, bits)
        if mask.prunable_count != count:
            raise FormatError(f"{what}: header prunable count {count} != {mask.prunable_count}")
        return mask


def save_mask(mask: Mask, path: str | Path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, mask.to_bytes())
    return path


def load_mask(path: str | Path) -> Mask:
    path = Path(path)
    return Mask.from_bytes(path.read_bytes(), str(path))


def _check_aligned(params: ParamStore, mask: Mask) -> None:
    if params.spec != mask.spec:
        raise MaskError("mask and parameters belong to different model specs")


def magnitude_mask(params: ParamStore, current: Mask, target_sparsity: float) -> Mask:
    """Globally prune the smallest-|w| unpruned prunable weights up to ``target_sparsity``.

    Ties go to the earlier tensor in registry order, then the lower flat index.
    """
    _check_aligned(params, current)
    if target_sparsity > 1 or target_sparsity < 0:
        raise MaskError(f"target sparsity {target_sparsity} outside [0, 1]")
    total = current.prunable_count
    want = target_count(target_sparsity, total)
    have = current.zero_count
    if want < have:
        raise MaskError(f"target sparsity {target_sparsity} below current {current.sparsity:.4f}")
    keep = current.prunable_vector().copy()
    if want > have:
        mags = np.concatenate([np.abs(params[n]).reshape(-1) for n in current.names])
        alive = np.flatnonzero(keep)
        order = alive[np.argsort(mags[alive], kind="stable")]
        keep[order[: want - have]] = 0
    return Mask.from_vector(current.spec, keep)


def random_mask(spec_or_params: ModelSpec | ParamStore, target_sparsity: float, seed: int) -> Mask:
    if not 0 <= target_sparsity <= 1:
        raise MaskError(f"target sparsity {target_sparsity} outside [0, 1]")
    base = Mask.ones(spec_or_params)
    total = base.prunable_count
    keep = np.ones(total, dtype=np.uint8)
    pick = rng(seed, "random-mask").choice(total, size=target_count(target_sparsity, total), replace=False)
    keep[pick] = 0
    return Mask.from_vector(base.spec, keep)


def apply_mask(params: ParamStore, mask: Mask) -> ParamStore:
    """Zero pruned weights in place (and return ``params``)."""
    _check_aligned(params, mask)
    for name, b in mask.bits.items():
        params[name][b == 0] = 0.0
    return params


# ---------------------------------------------------------------------------
# tickets and iterative schedules


@dataclass(frozen=True)
class PruneSchedule:
    mode: str = "imp-rewind"
    increment: float = 0.10
    iterations: int = 9

    def __post_init__(self) -> None:
        if self.mode not in ("imp-rewind", "standard", "one-shot"):
            raise ValueError(f"unknown pruning mode {self.mode!r}")
        if self.increment * self.iterations > 1 + 1e-12 or self.increment < 0 or self.iterations < 0:
            raise ValueError("need 0 <= increment * iterations <= 1")

    def sparsity(self, k: int) -> float:
        return round(k * self.increment, 12)


@dataclass
class Ticket:
    mask: Mask
    init: ParamStore
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mask.spec != self.init.spec:
            raise MaskError("ticket mask and init checkpoint reference different model specs")

    @property
    def sparsity(self) -> float:
        return self.mask.sparsity

    def save(self, directory: str | Path, stem: str) -> Path:
        directory = Path(directory)
        save_mask(self.mask, directory / f"{stem}.fmsk")
        save_checkpoint(self.init, directory / f"{stem}.fcpt")
        manifest = {"mask": f"{stem}.fmsk", "init": f"{stem}.fcpt", "provenance": self.provenance,
                    "sparsity": self.sparsity}
        path = directory / f"{stem}.ticket.json"
        atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, manifest_path: str | Path) -> "Ticket":
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise FileNotFoundError(f"ticket manifest not found: {manifest_path}")
        m = json.loads(manifest_path.read_text())
        base = manifest_path.parent
        return cls(load_mask(base / m["mask"]), load_checkpoint(base / m["init"]), m.get("provenance", {}))


@dataclass
class PruneRow:
    sparsity: float
    best_val_metric: float
    ticket: Ticket
    checkpoint: ParamStore


@dataclass
class PruneRun:
    dense: TrainResult
    rows: list[PruneRow]
    init: ParamStore


def _iterative(data: TaskData, init: ParamStore, cfg: TrainConfig, schedule: PruneSchedule,
               seed: int, rewind: bool, on_eval=None) -> PruneRun:
    dense = train(init, data, cfg, derive_seed(seed, "prune-iter", 0), on_eval=on_eval)
    source = dense.best
    mask = Mask.ones(init)
    rows: list[PruneRow] = []
    prov = {"task": data.spec.generator, "optimizer": cfg.optimizer, "seed": seed}
    for k in range(1, schedule.iterations + 1):
        mask = magnitude_mask(source, mask, schedule.sparsity(k))
        start = init.copy() if rewind else source.copy()
        apply_mask(start, mask)
        res = train(start, data, cfg, derive_seed(seed, "prune-iter", k), keep=mask.keep_vector(),
                    on_eval=on_eval)
        ticket = Ticket(mask, init, {**prov, "sparsity": mask.sparsity, "iteration": k})
        rows.append(PruneRow(mask.sparsity, res.best_val, ticket, res.best))
        source = res.best
    return PruneRun(dense, rows, init)


def imp_run(data: TaskData, init: ParamStore, cfg: TrainConfig, schedule: PruneSchedule,
            seed: int, on_eval=None) -> PruneRun:
    """Lottery-ticket IMP: train, prune from the best checkpoint, rewind survivors to ``init``."""
    if schedule.mode != "imp-rewind":
        raise ValueError(f"imp_run needs mode imp-rewind, got {schedule.mode}")
    return _iterative(data, init, cfg, schedule, seed, rewind=True, on_eval=on_eval)


def standard_prune_run(data: TaskData, init: ParamStore, cfg: TrainConfig, schedule: PruneSchedule,
                       seed: int, on_eval=None) -> PruneRun:
    """Like :func:`imp_run` but training resumes from the pruned best checkpoint."""
    if schedule.mode != "standard":
        raise ValueError(f"standard_prune_run needs mode standard, got {schedule.mode}")
    return _iterative(data, init, cfg, schedule, seed, rewind=False, on_eval=on_eval)


def oneshot_prune_eval(trained: ParamStore, sparsity_grid: Sequence[float], data: TaskData,
                       loss_kind: str = "cross-entropy") -> list[tuple[float, float]]:
    """Mask the trained model at each sparsity and evaluate without retraining."""
    grid = list(sparsity_grid)
    if any(s < 0 or s > 1 for s in grid) or grid != sorted(grid):
        raise ValueError("sparsity grid must be ascending values in [0, 1]")
    out = []
    val = data.val.batch()
    for s in grid:
        mask = magnitude_mask(trained, Mask.ones(trained), s)
        pruned = apply_mask(trained.copy(), mask)
        out.append((mask.sparsity, evaluate(pruned, val, loss_kind)[1]))
    return out


def check_compatible(spec: ModelSpec, data: TaskData) -> None:
    ts = data.spec
    if spec.kind == "mlp":
        if ts.is_sequence or spec.layer_sizes[0] != ts.input_dim:
            raise ValueError(f"ticket model expects {spec.layer_sizes[0]}-d features, task {ts.generator} "
                             f"provides {'sequences' if ts.is_sequence else f'{ts.input_dim}-d features'}")
    else:
        if not ts.is_sequence or ts.seq_len > spec.max_len:
            raise ValueError(f"ticket transformer (max_len {spec.max_len}) cannot read task {ts.generator}")
    n_labels = int(max(data.train.labels.max(), data.val.labels.max())) + 1
    if n_labels > spec.n_classes:
        raise ValueError(f"task {ts.generator} has {n_labels} classes, ticket head has {spec.n_classes}")


def transfer_ticket(ticket: Ticket, data: TaskData, cfg: TrainConfig, seed: int) -> tuple[float, ParamStore]:
    """Rewind to the ticket's init, apply its mask, train on ``data``."""
    check_compatible(ticket.init.spec, data)
    start = apply_mask(ticket.init.copy(), ticket.mask)
    res = train(start, data, cfg, derive_seed(seed, "transfer", data.spec.generator),
                keep=ticket.mask.keep_vector())
    return res.best_val, res.best
