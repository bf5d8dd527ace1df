"""Model definitions: MLP and tiny transformer-encoder classifiers.

Parameters live in a :class:`ParamStore`, a named registry backed by one flat
float64 buffer. Optimizers, SWA and the sharpness metric operate on that flat
vector directly; forward code reads named views.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from ._binio import FormatError, Writer, atomic_write_bytes, open_sealed
from .seeding import rng
from .tensor import Tensor

# roles: only "weight" is prunable; "head" is the classifier matrix
ROLES = ("weight", "head", "bias", "embedding", "norm")
LINEAR_ROLES = ("weight", "head")


class SpecError(ValueError):
    pass


class CheckpointMismatchError(FormatError):
    """Checkpoint tensors do not match the layout implied by its ModelSpec."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    # mlp: [input_dim, hidden..., n_classes]
    layer_sizes: tuple[int, ...] = (2, 16, 16, 2)
    activation: str = "relu"
    n_classes: int = 2
    # transformer
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab: int = 3
    max_len: int = 16
    pooling: str = "first"
    init_seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.kind not in ("mlp", "transformer"):
            problems.append(f"kind must be mlp or transformer, got {self.kind!r}")
        if self.activation not in ("relu", "gelu", "tanh"):
            problems.append(f"unknown activation {self.activation!r}")
        if self.n_classes < 1:
            problems.append("n_classes must be >= 1")
        if self.kind == "mlp":
            if len(self.layer_sizes) < 3:
                problems.append("mlp needs at least one hidden layer (layer_sizes has < 3 entries)")
            if any(int(s) < 1 for s in self.layer_sizes):
                problems.append("all layer sizes must be >= 1")
            if self.layer_sizes and self.layer_sizes[-1] != self.n_classes:
                problems.append("last layer size must equal n_classes")
        else:
            for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab", "max_len"):
                if getattr(self, name) < 1:
                    problems.append(f"{name} must be >= 1")
            if self.n_heads >= 1 and self.d_model % self.n_heads:
                problems.append("d_model must be divisible by n_heads")
            if self.pooling not in ("first", "mean"):
                problems.append(f"pooling must be first or mean, got {self.pooling!r}")
        if problems:
            raise SpecError("invalid ModelSpec: " + "; ".join(problems))

    def to_json(self) -> str:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown ModelSpec fields: {sorted(unknown)}")
        d = dict(d)
        if "layer_sizes" in d:
            d["layer_sizes"] = tuple(int(x) for x in d["layer_sizes"])
        return cls(**d)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class _Entry:
    name: str
    shape: tuple[int, ...]
    role: str
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def prunable(self) -> bool:
        return self.role == "weight"


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, role) for every parameter, in registry order."""
    out: list[tuple[str, tuple[int, ...], str]] = []
    if spec.kind == "mlp":
        sizes = [int(s) for s in spec.layer_sizes]
        for i in range(len(sizes) - 2):
            out.append((f"layer{i}.weight", (sizes[i], sizes[i + 1]), "weight"))
            out.append((f"layer{i}.bias", (sizes[i + 1],), "bias"))
        out.append(("head.weight", (sizes[-2], sizes[-1]), "head"))
        out.append(("head.bias", (sizes[-1],), "bias"))
        return out
    d, f = spec.d_model, spec.d_ff
    out.append(("embed.token", (spec.vocab, d), "embedding"))
    out.append(("embed.position", (spec.max_len, d), "embedding"))
    for l in range(spec.n_layers):
        p = f"block{l}"
        for proj in ("q", "k", "v", "o"):
            out.append((f"{p}.attn.{proj}.weight", (d, d), "weight"))
            out.append((f"{p}.attn.{proj}.bias", (d,), "bias"))
        out.append((f"{p}.ln1.gain", (d,), "norm"))
        out.append((f"{p}.ln1.bias", (d,), "norm"))
        out.append((f"{p}.ff1.weight", (d, f), "weight"))
        out.append((f"{p}.ff1.bias", (f,), "bias"))
        out.append((f"{p}.ff2.weight", (f, d), "weight"))
        out.append((f"{p}.ff2.bias", (d,), "bias"))
        out.append((f"{p}.ln2.gain", (d,), "norm"))
        out.append((f"{p}.ln2.bias", (d,), "norm"))
    out.append(("head.weight", (d, spec.n_classes), "head"))
    out.append(("head.bias", (spec.n_classes,), "bias"))
    return out


class ParamStore:
    """Ordered named parameters over one contiguous float64 buffer."""

    def __init__(self, spec: ModelSpec, flat: np.ndarray | None = None,
                 metadata: Mapping | None = None) -> None:
        self.spec = spec
        self.metadata: dict = dict(metadata or {})
        self._entries: list[_Entry] = []
        off = 0
        for name, shape, role in param_layout(spec):
            e = _Entry(name, shape, role, off)
            self._entries.append(e)
            off += e.size
        self._index = {e.name: e for e in self._entries}
        if flat is None:
            flat = np.zeros(off)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (off,):
            raise CheckpointMismatchError(f"flat buffer has {flat.size} values, layout needs {off}")
        self.flat = flat
        self._views = {e.name: flat[e.offset: e.offset + e.size].reshape(e.shape)
                       for e in self._entries}

    # registry
    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return (e.name for e in self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def names(self) -> list[str]:
        return [e.name for e in self._entries]

    def items(self):
        return ((e.name, self._views[e.name]) for e in self._entries)

    def role(self, name: str) -> str:
        return self._index[name].role

    def prunable(self, name: str) -> bool:
        return self._index[name].prunable

    def shape(self, name: str) -> tuple[int, ...]:
        return self._index[name].shape

    def slice(self, name: str) -> slice:
        e = self._index[name]
        return slice(e.offset, e.offset + e.size)

    @property
    def prunable_names(self) -> list[str]:
        return [e.name for e in self._entries if e.prunable]

    @property
    def prunable_count(self) -> int:
        """Denominator of every reported sparsity."""
        return sum(e.size for e in self._entries if e.prunable)

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, self.flat.copy(), self.metadata)

    def with_flat(self, flat: np.ndarray) -> "ParamStore":
        return ParamStore(self.spec, np.array(flat, dtype=np.float64, copy=True), self.metadata)

    def load_flat(self, flat: np.ndarray) -> None:
        self.flat[:] = flat

    def leaves(self) -> dict[str, Tensor]:
        """Fresh requires-grad leaf tensors aliasing the stored values."""
        return {e.name: Tensor(self._views[e.name], requires_grad=True, name=e.name)
                for e in self._entries}

    def constants(self) -> dict[str, Tensor]:
        return {e.name: Tensor(self._views[e.name], name=e.name) for e in self._entries}

    def flatten_grads(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.flat.size)
        for e in self._entries:
            g = grads.get(e.name)
            if g is not None:
                out[e.offset: e.offset + e.size] = np.asarray(g).reshape(-1)
        return out

    def same_values(self, other: "ParamStore") -> bool:
        return self.spec == other.spec and np.array_equal(self.flat, other.flat)


def _init_values(spec: ModelSpec, name: str, shape, role: str, gen: np.random.Generator) -> np.ndarray:
    if role in ("weight", "head"):
        fan_in = shape[0]
        bound = math.sqrt(6.0 / fan_in) if role == "weight" else math.sqrt(1.0 / fan_in)
        return gen.uniform(-bound, bound, size=shape)
    if role == "embedding":
        return gen.uniform(-1.0, 1.0, size=shape)
    if role == "norm":
        return np.ones(shape) if name.endswith("gain") else np.zeros(shape)
    return np.zeros(shape)


def build_model(spec: ModelSpec) -> ParamStore:
    """Deterministic initialization from ``spec.init_seed``."""
    spec.validate()
    ps = ParamStore(spec)
    for name, arr in ps.items():
        gen = rng(spec.init_seed, "init", name)
        arr[...] = _init_values(spec, name, arr.shape, ps.role(name), gen)
    return ps


# ---------------------------------------------------------------------------
# forward


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


class ForwardOut(NamedTuple):
    loss: Tensor
    metric: float
    logits: np.ndarray


LinearFn = Callable[[Tensor, str], Tensor]


def _activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "gelu":
        return T.gelu(x)
    return T.tanh(x)


def forward_logits(spec: ModelSpec, p: Mapping[str, Tensor], inputs: np.ndarray,
                   gates: Mapping[str, Tensor] | None = None,
                   linear: Callable[[Tensor, str], Tensor] | None = None) -> Tensor:
    """Logits for ``inputs``.

    ``linear(x, prefix)`` computes ``x @ W + b`` for the layer named ``prefix``
    (default: float matmul); the quantized path swaps it out. ``gates`` holds
    per-block ``"block{l}.heads"`` (n_heads,) and ``"block{l}.ff"`` (d_ff,)
    multipliers for structured pruning.
    """
    if linear is None:
        def linear(x: Tensor, prefix: str) -> Tensor:
            return T.add(T.matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"])

    if spec.kind == "mlp":
        x = Tensor(np.asarray(inputs, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
            raise T.ShapeError(f"mlp input must be (N, {spec.layer_sizes[0]}), got {x.shape}")
        for i in range(len(spec.layer_sizes) - 2):
            x = _activation(spec.activation, linear(x, f"layer{i}"))
        return linear(x, "head")

    tokens = np.asarray(inputs)
    if tokens.ndim != 2 or tokens.shape[1] > spec.max_len:
        raise T.ShapeError(f"transformer input must be (N, L<={spec.max_len}), got {tokens.shape}")
    n, L = tokens.shape
    h, dh, d = spec.n_heads, spec.head_dim, spec.d_model
    pos = p["embed.position"]
    if L < spec.max_len:
        pos = T.reshape(T.matmul(Tensor(np.eye(spec.max_len)[:L]), pos), (L, d))
    x = T.add(T.embedding(p["embed.token"], tokens), pos)
    inv_sqrt = 1.0 / math.sqrt(dh)
    for l in range(spec.n_layers):
        b = f"block{l}"
        q = T.transpose(T.reshape(linear(x, f"{b}.attn.q"), (n, L, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(linear(x, f"{b}.attn.k"), (n, L, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(linear(x, f"{b}.attn.v"), (n, L, h, dh)), (0, 2, 1, 3))
        att = T.softmax(T.scale(T.matmul(q, k), inv_sqrt))
        ctx = T.transpose(T.matmul(att, v), (0, 2, 1, 3))  # (n, L, h, dh)
        if gates is not None and f"{b}.heads" in gates:
            g = T.matmul(T.reshape(gates[f"{b}.heads"], (h, 1)), Tensor(np.ones((1, dh))))
            ctx = T.mul(ctx, g)
        ctx = T.reshape(ctx, (n, L, d))
        x = T.layernorm(T.add(x, linear(ctx, f"{b}.attn.o")), p[f"{b}.ln1.gain"], p[f"{b}.ln1.bias"])
        hid = _activation(spec.activation, linear(x, f"{b}.ff1"))
        if gates is not None and f"{b}.ff" in gates:
            hid = T.mul(hid, gates[f"{b}.ff"])
        x = T.layernorm(T.add(x, linear(hid, f"{b}.ff2")), p[f"{b}.ln2.gain"], p[f"{b}.ln2.bias"])
    if spec.pooling == "first":
        sel = np.zeros((L, 1))
        sel[0, 0] = 1.0
    else:
        sel = np.full((L, 1), 1.0 / L)
    pooled = T.reshape(T.matmul(T.transpose(x, (0, 2, 1)), Tensor(sel)), (n, d))
    return linear(pooled, "head")


def metric_from_logits(logits: np.ndarray, labels: np.ndarray, loss_kind: str = "cross-entropy") -> float:
    if loss_kind == "mse" and logits.shape[1] == 1:
        pred = logits[:, 0]
        y = labels.astype(np.float64)
        if pred.std() == 0 or y.std() == 0:
            return 0.0
        return float(np.corrcoef(pred, y)[0, 1])
    return float((logits.argmax(axis=1) == labels).mean())


def loss_from_logits(logits: Tensor, labels: np.ndarray, loss_kind: str = "cross-entropy") -> Tensor:
    if loss_kind == "cross-entropy":
        return T.cross_entropy(logits, labels)
    if loss_kind == "mse":
        if logits.shape[1] == 1:
            target = labels.astype(np.float64).reshape(-1, 1)
        else:
            target = np.eye(logits.shape[1])[labels]
        return T.mse(logits, Tensor(target))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _check_labels(spec: ModelSpec, labels: np.ndarray, loss_kind: str) -> None:
    if loss_kind == "mse" and spec.n_classes == 1:
        return
    if labels.size and (labels.min() < 0 or labels.max() >= spec.n_classes):
        raise ValueError(f"label out of range for {spec.n_classes} classes")


def model_forward(params: ParamStore, batch: Batch, loss_kind: str = "cross-entropy", *,
                  tensors: Mapping[str, Tensor] | None = None,
                  gates: Mapping[str, Tensor] | None = None) -> ForwardOut:
    """Loss (recorded on the active tape when ``tensors`` require grad) and metric.

    Never mutates ``params``.
    """
    labels = np.asarray(batch.labels)
    _check_labels(params.spec, labels, loss_kind)
    p = tensors if tensors is not None else params.constants()
    logits = forward_logits(params.spec, p, batch.inputs, gates=gates)
    loss = loss_from_logits(logits, labels, loss_kind)
    return ForwardOut(loss, metric_from_logits(logits.data, labels, loss_kind), logits.data)


def evaluate(params: ParamStore, batch: Batch, loss_kind: str = "cross-entropy",
             gates: Mapping[str, Tensor] | None = None) -> tuple[float, float]:
    """(loss, metric) without recording anything."""
    with T.no_grad():
        out = model_forward(params, batch, loss_kind, gates=gates)
    return out.loss.item(), out.metric


def loss_and_grad(params: ParamStore, batch: Batch, loss_kind: str = "cross-entropy",
                  extra_loss: Callable[[Mapping[str, Tensor]], Tensor] | None = None,
                  gates: Mapping[str, Tensor] | None = None) -> tuple[float, np.ndarray, float]:
    """(loss, flat gradient, metric) at the current parameter values."""
    with T.Tape() as tape:
        leaves = params.leaves()
        out = model_forward(params, batch, loss_kind, tensors=leaves, gates=gates)
        loss = out.loss
        if extra_loss is not None:
            loss = T.add(loss, extra_loss(leaves))
    grads = T.backward(tape, loss, wrt=list(leaves.values()))
    flat = params.flatten_grads({name: grads[t] for name, t in leaves.items()})
    return loss.item(), flat, out.metric


# ---------------------------------------------------------------------------
# checkpoints (.fcpt)

FCPT_MAGIC = b"FCPT"
FCPT_VERSION = b"1"


def checkpoint_bytes(params: ParamStore, metadata: Mapping | None = None) -> bytes:
    meta = dict(params.metadata)
    if metadata:
        meta.update(metadata)
    w = Writer(FCPT_MAGIC + FCPT_VERSION)
    w.string(params.spec.to_json())
    w.string(json.dumps(meta, sort_keys=True))
    w.u32(len(params))
    for name, arr in params.items():
        w.string(name)
        w.shape(arr.shape)
        w.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return w.sealed()


def save_checkpoint(params: ParamStore, path: str | Path, metadata: Mapping | None = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(params, metadata))
    return path


def checkpoint_from_bytes(raw: bytes, what: str = "checkpoint") -> ParamStore:
    r = open_sealed(raw, FCPT_MAGIC, FCPT_VERSION, what)
    try:
        spec = ModelSpec.from_dict(json.loads(r.string()))
        meta = json.loads(r.string())
    except (json.JSONDecodeError, SpecError, UnicodeDecodeError) as exc:
        raise FormatError(f"{what}: bad header ({exc})") from None
    ps = ParamStore(spec, metadata=meta)
    count = r.u32()
    expected = ps.names()
    if count != len(expected):
        raise CheckpointMismatchError(f"{what}: {count} tensors, spec implies {len(expected)}")
    for want in expected:
        name = r.string()
        shape = r.shape()
        if name != want:
            raise CheckpointMismatchError(f"{what}: tensor {name!r} where spec expects {want!r}")
        if shape != ps.shape(name):
            raise CheckpointMismatchError(f"{what}: {name} has shape {shape}, spec implies {ps.shape(name)}")
        n = int(np.prod(shape, dtype=np.int64))
        ps[name][...] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
    if not r.done():
        raise FormatError(f"{what}: trailing bytes after last tensor")
    return ps


def load_checkpoint(path: str | Path) -> ParamStore:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), str(path))
