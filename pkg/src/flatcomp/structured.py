"""Structured pruning with hard-concrete L0 gates and logit distillation.

Each attention head and each feed-forward hidden unit of a transformer
student gets one gate. Training minimises

    CE(student) + dw * t^2 * KL(softmax(teacher/t) || softmax(student/t))
    + lam * (s_hat - s_target)

where ``s_hat`` is the expected fraction of gated parameters removed and
``lam`` follows gradient ascent. In practice the multiplier is a
proportional-integral controller: the gradient flows through ``s_hat`` with
coefficient ``lam + mu * gap``, and after warm-up ``gap`` is read off the
hardened structure rather than ``s_hat``. A purely linear multiplier
oscillates when whole attention heads switch, and the residual open
probability of closed gates keeps ``s_hat`` below the hardened sparsity.

Gates are then hardened, the closed groups' parameter slices are zeroed and
the student is fine-tuned with the structure fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from ._binio import atomic_write_text
from .datasets import TaskData, batches
from .models import Batch, ModelSpec, ParamStore, evaluate, forward_logits, save_checkpoint
from .optim import AdamState, DivergenceError, adam_step
from .seeding import derive_seed, rng
from .tensor import NonFiniteError, Tensor


class GateError(ValueError):
    pass


@dataclass(frozen=True)
class HardConcrete:
    beta: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self) -> None:
        if not (self.gamma < 0 < self.zeta):
            raise GateError("hard-concrete constants need gamma < 0 < zeta")
        if not self.beta > 0:
            raise GateError("hard-concrete temperature beta must be > 0")

    @property
    def shift(self) -> float:
        return self.beta * math.log(-self.gamma / self.zeta)


def sample_gate(log_alpha, u, hc: HardConcrete = HardConcrete()):
    """Hard-concrete sample. Works on floats, arrays and Tensors (differentiable)."""
    u_arr = np.asarray(u, dtype=np.float64)
    if not ((u_arr > 0) & (u_arr < 1)).all():
        raise GateError("sample_gate: u must lie strictly inside (0, 1)")
    noise = np.log(u_arr) - np.log1p(-u_arr)
    if isinstance(log_alpha, Tensor):
        s = T.sigmoid(T.scale(T.add(log_alpha, Tensor(noise)), 1.0 / hc.beta))
        return T.clamp(T.add_scalar(T.scale(s, hc.zeta - hc.gamma), hc.gamma), 0.0, 1.0)
    s = 1.0 / (1.0 + np.exp(-(noise + np.asarray(log_alpha, dtype=np.float64)) / hc.beta))
    out = np.clip(s * (hc.zeta - hc.gamma) + hc.gamma, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def expected_open_prob(log_alpha, hc: HardConcrete = HardConcrete()):
    """P(gate > 0) = sigmoid(log_alpha - beta log(-gamma/zeta))."""
    if isinstance(log_alpha, Tensor):
        return T.sigmoid(T.add_scalar(log_alpha, -hc.shift))
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-(np.asarray(log_alpha, dtype=np.float64) - hc.shift)))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# gate groups


def group_sizes(spec: ModelSpec) -> dict[str, tuple[int, int]]:
    """``{gate name: (number of groups, parameters per group)}`` for a transformer."""
    if spec.kind != "transformer":
        raise GateError("structured pruning needs a transformer ModelSpec")
    d, dh = spec.d_model, spec.head_dim
    out = {}
    for l in range(spec.n_layers):
        # q, k, v columns + their biases, and the matching rows of o
        out[f"block{l}.heads"] = (spec.n_heads, 4 * d * dh + 3 * dh)
        # ff1 column + bias, ff2 row
        out[f"block{l}.ff"] = (spec.d_ff, 2 * d + 1)
    return out


@dataclass
class GateSet:
    spec: ModelSpec
    log_alpha: dict[str, np.ndarray]
    hc: HardConcrete = field(default_factory=HardConcrete)

    @classmethod
    def init(cls, spec: ModelSpec, value: float = 2.0, hc: HardConcrete | None = None) -> "GateSet":
        la = {name: np.full(n, float(value)) for name, (n, _) in group_sizes(spec).items()}
        return cls(spec, la, hc or HardConcrete())

    def __post_init__(self) -> None:
        sizes = group_sizes(self.spec)
        if set(sizes) != set(self.log_alpha):
            raise GateError("gate set must cover every head and FF unit group exactly once")
        for name, (n, _) in sizes.items():
            if self.log_alpha[name].shape != (n,):
                raise GateError(f"gate group {name} needs shape ({n},)")

    def names(self) -> list[str]:
        return list(group_sizes(self.spec))

    def total_gated(self) -> int:
        return sum(n * c for n, c in group_sizes(self.spec).values())


def expected_sparsity(gs: GateSet, la: Mapping[str, Tensor] | None = None):
    """Expected fraction of gated parameters removed (Tensor if ``la`` given)."""
    sizes = group_sizes(gs.spec)
    total = gs.total_gated()
    if la is None:
        kept = sum(c * float(np.sum(expected_open_prob(gs.log_alpha[n], gs.hc))) for n, (_, c) in sizes.items())
        return 1.0 - kept / total
    kept = None
    for n, (_, c) in sizes.items():
        term = T.scale(T.sum_(expected_open_prob(la[n], gs.hc)), c / total)
        kept = term if kept is None else T.add(kept, term)
    return T.add_scalar(T.neg(kept), 1.0)


@dataclass
class StructureMask:
    spec: ModelSpec
    open: dict[str, np.ndarray]  # bool per group
    sparsity: float

    def closed_groups(self) -> list[str]:
        return [f"{n}[{i}]" for n, arr in self.open.items() for i in np.flatnonzero(~arr)]

    def gates(self) -> dict[str, Tensor]:
        return {n: Tensor(arr.astype(np.float64)) for n, arr in self.open.items()}

    def to_json(self) -> str:
        return json.dumps({"sparsity": self.sparsity, "closed": self.closed_groups(),
                           "open": {n: arr.astype(int).tolist() for n, arr in self.open.items()}},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, spec: ModelSpec, text: str) -> "StructureMask":
        d = json.loads(text)
        return cls(spec, {n: np.asarray(v, dtype=bool) for n, v in d["open"].items()}, float(d["sparsity"]))


def structure_sparsity(spec: ModelSpec, open_: Mapping[str, np.ndarray]) -> float:
    sizes = group_sizes(spec)
    total = sum(n * c for n, c in sizes.values())
    removed = sum(c * int((~np.asarray(open_[n], dtype=bool)).sum()) for n, (_, c) in sizes.items())
    return removed / total


def harden_gates(gs: GateSet) -> StructureMask:
    """Open iff ``expected_open_prob >= 0.5``; sparsity weighted by group parameter counts."""
    open_ = {n: np.asarray(expected_open_prob(gs.log_alpha[n], gs.hc)) >= 0.5 for n in gs.names()}
    return StructureMask(gs.spec, open_, structure_sparsity(gs.spec, open_))


CLOSED_LOG_ALPHA = -6.0


def infeasible_groups(gs: GateSet, s_target: float, tolerance: float) -> dict[str, np.ndarray]:
    """Groups larger than the whole kept-parameter budget at ``s_target``.

    No structure within tolerance of the target can keep such a group open,
    so after warm-up its gate is held closed instead of being left to
    flicker around the threshold.
    """
    budget = (1.0 - s_target + tolerance) * gs.total_gated()
    return {n: np.full(k, c > budget) for n, (k, c) in group_sizes(gs.spec).items()}


def structure_keep(params: ParamStore, mask: StructureMask) -> np.ndarray:
    """Flat uint8 keep vector that freezes (and marks for zeroing) every closed group's slices."""
    spec = params.spec
    keep = np.ones(params.size, dtype=np.uint8)
    view = {n: keep[params.slice(n)].reshape(params.shape(n)) for n in params.names()}
    dh = spec.head_dim
    for l in range(spec.n_layers):
        b = f"block{l}"
        for h in np.flatnonzero(~mask.open[f"{b}.heads"]):
            cols = slice(h * dh, (h + 1) * dh)
            for proj in ("q", "k", "v"):
                view[f"{b}.attn.{proj}.weight"][:, cols] = 0
                view[f"{b}.attn.{proj}.bias"][cols] = 0
            view[f"{b}.attn.o.weight"][cols, :] = 0
        for u in np.flatnonzero(~mask.open[f"{b}.ff"]):
            view[f"{b}.ff1.weight"][:, u] = 0
            view[f"{b}.ff1.bias"][u] = 0
            view[f"{b}.ff2.weight"][u, :] = 0
    return keep


def apply_structure(params: ParamStore, mask: StructureMask) -> np.ndarray:
    keep = structure_keep(params, mask)
    params.flat[keep == 0] = 0.0
    return keep


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class StructuredPruneConfig:
    s_target: float = 0.95
    lr: float = 1e-3
    gate_lr: float = 0.05
    lambda_lr: float = 2.0
    lambda_init: float = 0.0
    penalty: float = 500.0
    distill_weight: float = 1.0
    temperature: float = 2.0
    warmup_frac: float = 0.5
    finetune_epochs: int = 5
    settle_epochs: int = 10
    batch_size: int = 32
    gate_init: float = 2.0
    tolerance: float = 0.01
    hc: HardConcrete = field(default_factory=HardConcrete)

    def __post_init__(self) -> None:
        if not 0.0 <= self.s_target < 1.0:
            raise ValueError("s_target must be in [0, 1)")
        if not self.temperature > 0:
            raise ValueError("distillation temperature must be > 0")
        if self.distill_weight < 0 or self.penalty < 0 or self.finetune_epochs < 0 or self.settle_epochs < 0 or not 0 <= self.warmup_frac <= 1:
            raise ValueError("invalid structured pruning config")


@dataclass
class DistillPair:
    teacher: ParamStore
    student: ParamStore

    def __post_init__(self) -> None:
        t, s = self.teacher.spec, self.student.spec
        if t.kind != s.kind or t.n_classes != s.n_classes or t.vocab != s.vocab or t.max_len != s.max_len:
            raise ValueError("teacher and student must share the task input/output interface")


@dataclass
class StructuredResult:
    student: ParamStore
    structure: StructureMask
    gates: GateSet
    sparsity: float
    val_metric: float
    within_target: bool
    lambda_trace: list[float]
    expected_trace: list[float]
    hardened_trace: list[float]

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        ck = save_checkpoint(self.student, stem.with_suffix(".fcpt"),
                             {"sparsity": self.sparsity, "val_metric": self.val_metric})
        side = stem.parent / (stem.name + ".structure.json")
        atomic_write_text(side, self.structure.to_json())
        return ck, side


def _teacher_logits(teacher: ParamStore, inputs: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return forward_logits(teacher.spec, teacher.constants(), inputs).data


def distill_kl(student_logits: Tensor, teacher_logits: np.ndarray, t: float) -> Tensor:
    """Batch-mean ``KL(softmax(teacher/t) || softmax(student/t))``; exactly 0 when logits agree."""
    # both sides go through the same log-softmax so equal logits give exactly 0
    with T.no_grad():
        log_pt = T.log_softmax(T.scale(Tensor(np.asarray(teacher_logits, dtype=np.float64)), 1.0 / t)).data
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.scale(student_logits, 1.0 / t))
    diff = T.sub(Tensor(log_pt), log_ps)
    return T.mean(T.sum_(T.mul(Tensor(pt), diff), axis=1))


def _objective(student: Mapping[str, Tensor], spec: ModelSpec, batch: Batch, teacher_logits: np.ndarray,
               gates: Mapping[str, Tensor] | None, cfg: StructuredPruneConfig) -> tuple[Tensor, Tensor]:
    logits = forward_logits(spec, student, batch.inputs, gates=gates)
    ce = T.cross_entropy(logits, np.asarray(batch.labels))
    kl = distill_kl(logits, teacher_logits, cfg.temperature)
    return T.add(ce, T.scale(kl, cfg.distill_weight * cfg.temperature ** 2)), kl


def structured_prune_train(pair: DistillPair, data: TaskData, cfg: StructuredPruneConfig,
                           epochs: int, seed: int) -> StructuredResult:
    """Gate training, hardening, then ``cfg.finetune_epochs`` of fine-tuning with the structure fixed.

    Gates train for ``epochs`` epochs, plus up to ``cfg.settle_epochs`` more
    at the full target while the hardened sparsity is outside tolerance.
    """
    student = pair.student.copy()
    spec = student.spec
    gs = GateSet.init(spec, cfg.gate_init, cfg.hc)
    names = gs.names()
    gate_state = {n: AdamState(np.zeros_like(gs.log_alpha[n]), np.zeros_like(gs.log_alpha[n]),
                               lr=cfg.gate_lr, beta2=0.99) for n in names}
    state = AdamState.for_params(student, lr=cfg.lr)
    lam = cfg.lambda_init
    noise = rng(seed, "gate-noise")
    shuffle_seed = derive_seed(seed, "structured-shuffle")
    n_batches = math.ceil(len(data.train) / cfg.batch_size)
    total = max(1, n_batches * epochs)
    warm = max(1, int(round(cfg.warmup_frac * total)))
    blocked = infeasible_groups(gs, cfg.s_target, cfg.tolerance)
    lam_trace, exp_trace, hard_trace = [], [], []
    step = 0
    for epoch in range(1, epochs + cfg.settle_epochs + 1):
        if epoch > epochs and abs(hard_trace[-1] - cfg.s_target) <= cfg.tolerance:
            break
        for batch in batches(data.train, cfg.batch_size, shuffle_seed, epoch):
            target = cfg.s_target * min(1.0, step / warm)
            tl = _teacher_logits(pair.teacher, batch.inputs)
            with T.Tape() as tape:
                leaves = student.leaves()
                la = {n: Tensor(gs.log_alpha[n], requires_grad=True) for n in names}
                gates = {n: sample_gate(la[n], noise.uniform(1e-6, 1 - 1e-6, la[n].shape), gs.hc) for n in names}
                base, _ = _objective(leaves, spec, batch, tl, gates, cfg)
                s_hat = expected_sparsity(gs, la)
                # after warm-up the controller reads the hardened structure, so the
                # residual open-probability of closed gates cannot hold it off target
                measured = s_hat.item() if step < warm else harden_gates(gs).sparsity
                gap = measured - target
                loss = T.add(base, T.scale(T.add_scalar(s_hat, -target), lam + cfg.penalty * gap))
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"structured pruning diverged at epoch {epoch}, step {step}")
            grads = T.backward(tape, loss, wrt=list(leaves.values()) + list(la.values()))
            try:
                adam_step(student, student.flatten_grads({n: grads[t] for n, t in leaves.items()}), state)
            except NonFiniteError as exc:
                raise DivergenceError(f"structured pruning diverged at epoch {epoch}, step {step}") from exc
            for n in names:
                _adam_vec(gs.log_alpha[n], grads[la[n]], gate_state[n])
                if step >= warm and blocked[n].any():
                    gs.log_alpha[n][blocked[n]] = np.minimum(gs.log_alpha[n][blocked[n]], CLOSED_LOG_ALPHA)
            # ascent on the multiplier; held during warm-up so the ramp cannot wind it up
            if step >= warm:
                lam += cfg.lambda_lr * gap
            if not math.isfinite(lam):
                raise DivergenceError("Lagrange multiplier diverged")
            step += 1
        lam_trace.append(lam)
        exp_trace.append(float(expected_sparsity(gs)))
        hard_trace.append(harden_gates(gs).sparsity)

    structure = harden_gates(gs)
    keep = apply_structure(student, structure)
    val = data.val.batch()
    best, best_val = student.copy(), evaluate(student, val)[1]
    ft_state = AdamState.for_params(student, lr=cfg.lr)
    ft_seed = derive_seed(seed, "structured-finetune")
    for epoch in range(1, cfg.finetune_epochs + 1):
        for batch in batches(data.train, cfg.batch_size, ft_seed, epoch):
            tl = _teacher_logits(pair.teacher, batch.inputs)
            with T.Tape() as tape:
                leaves = student.leaves()
                loss, _ = _objective(leaves, spec, batch, tl, None, cfg)
            grads = T.backward(tape, loss, wrt=list(leaves.values()))
            try:
                adam_step(student, student.flatten_grads({n: grads[t] for n, t in leaves.items()}), ft_state,
                          keep=keep)
            except NonFiniteError as exc:
                raise DivergenceError(f"structured fine-tuning diverged at epoch {epoch}") from exc
        metric = evaluate(student, val)[1]
        if metric > best_val:
            best, best_val = student.copy(), metric
    ok = abs(structure.sparsity - cfg.s_target) <= cfg.tolerance + 1e-12
    return StructuredResult(best, structure, gs, structure.sparsity, best_val, ok, lam_trace, exp_trace, hard_trace)


def _adam_vec(x: np.ndarray, g: np.ndarray, st: AdamState) -> None:
    st.t += 1
    st.m[:] = st.beta1 * st.m + (1 - st.beta1) * g
    st.v[:] = st.beta2 * st.v + (1 - st.beta2) * g * g
    mh = st.m / (1 - st.beta1 ** st.t)
    vh = st.v / (1 - st.beta2 ** st.t)
    x -= st.lr * mh / (np.sqrt(vh) + st.eps)
