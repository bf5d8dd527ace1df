"""Adam, sharpness-aware Adam, stochastic weight averaging and regularizers.

All updates act in place on ``ParamStore.flat``. A ``keep`` vector (uint8,
same length as the flat buffer, 0 = frozen) implements pruning masks: frozen
coordinates get no SAM perturbation, no update and no moment change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .models import Batch, ParamStore, loss_and_grad
from .tensor import NonFiniteError, Tensor


class DivergenceError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "AdamState":
        n = params.size
        return cls(np.zeros(n), np.zeros(n), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1,
                         self.beta2, self.eps, self.weight_decay)


def adam_step(params: ParamStore, grad: np.ndarray, state: AdamState,
              keep: np.ndarray | None = None, lr: float | None = None) -> ParamStore:
    if grad.shape != params.flat.shape:
        raise ValueError(f"adam_step: gradient has shape {grad.shape}, params {params.flat.shape}")
    if not np.isfinite(grad).all():
        raise NonFiniteError("adam_step: non-finite gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    kernels.adam_update(params.flat, np.ascontiguousarray(grad), state.m, state.v, keep,
                        state.lr if lr is None else lr, state.beta1, state.beta2, state.eps,
                        bc1, bc2, state.weight_decay)
    return params


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05

    def __post_init__(self) -> None:
        if not self.rho >= 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")


class SamStepInfo(NamedTuple):
    loss: float
    perturbed_loss: float
    grad_norm: float
    eps_norm: float


LossGradFn = Callable[[ParamStore, Batch], tuple[float, np.ndarray]]


def default_loss_grad(loss_kind: str = "cross-entropy", extra_loss=None) -> LossGradFn:
    def fn(params: ParamStore, batch: Batch) -> tuple[float, np.ndarray]:
        loss, g, _ = loss_and_grad(params, batch, loss_kind, extra_loss=extra_loss)
        return loss, g
    return fn


def sam_step(params: ParamStore, batch: Batch, loss_fn: LossGradFn, sam: SamConfig,
             state: AdamState, keep: np.ndarray | None = None,
             lr: float | None = None) -> SamStepInfo:
    """One SAM update: ascend to ``w + rho g/|g|``, take the gradient there, step from ``w``.

    Both gradients use the same minibatch. The norm is global over the flat
    parameter vector; frozen coordinates are then zeroed in the perturbation.
    """
    loss, g1 = loss_fn(params, batch)
    gnorm = float(np.sqrt(np.dot(g1, g1)))
    if gnorm == 0.0 or sam.rho == 0.0:
        eps = np.zeros_like(g1)
    else:
        eps = (sam.rho / gnorm) * g1
        if keep is not None:
            eps[keep == 0] = 0.0
    saved = params.flat.copy()
    params.flat += eps
    try:
        ploss, g2 = loss_fn(params, batch)
    except NonFiniteError as exc:
        params.flat[:] = saved
        raise DivergenceError(f"SAM: non-finite loss at perturbed point (|g1|={gnorm:.6g}, rho={sam.rho})") from exc
    params.flat[:] = saved
    if not math.isfinite(ploss):
        raise DivergenceError(f"SAM: non-finite loss at perturbed point (|g1|={gnorm:.6g}, rho={sam.rho})")
    adam_step(params, g2, state, keep=keep, lr=lr)
    return SamStepInfo(loss, ploss, gnorm, float(np.sqrt(np.dot(eps, eps))))


# ---------------------------------------------------------------------------
# SWA


@dataclass
class SwaState:
    mean: np.ndarray
    count: int = 0
    window: float = 0.5

    @classmethod
    def for_params(cls, params: ParamStore, window: float = 0.5) -> "SwaState":
        return cls(np.zeros(params.size), 0, window)


def swa_update(state: SwaState, checkpoint: ParamStore | np.ndarray) -> SwaState:
    flat = checkpoint.flat if isinstance(checkpoint, ParamStore) else np.asarray(checkpoint)
    if flat.shape != state.mean.shape:
        raise ValueError(f"swa_update: checkpoint shape {flat.shape} != running mean {state.mean.shape}")
    state.mean += (flat - state.mean) / (state.count + 1)
    state.count += 1
    return state


def swa_schedule(total_epochs: float, eval_points: Sequence[float]) -> list[float]:
    """Evaluation points that fall in the last half of training."""
    if total_epochs < 2:
        raise ValueError("swa_schedule: total_epochs must be >= 2")
    pts = sorted(float(p) for p in eval_points)
    if len(pts) < 2:
        raise ValueError("swa_schedule: need at least 2 evaluation points")
    half = total_epochs / 2.0
    return [p for p in pts if p > half]


# ---------------------------------------------------------------------------
# regularizers


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    coefficient: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "l1"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not math.isfinite(self.coefficient) or self.coefficient < 0:
            raise ValueError("regularizer coefficient must be finite and >= 0")


def l1_penalty(tensors: Mapping[str, Tensor], prunable: Sequence[str], coefficient: float) -> Tensor:
    total = None
    for name in prunable:
        term = T.l1_norm(tensors[name])
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(np.asarray(0.0))
    return T.scale(total, coefficient)


def regularized_loss(base_loss: Tensor, tensors: Mapping[str, Tensor], prunable: Sequence[str],
                     reg: RegularizerSpec) -> Tensor:
    if reg.kind == "none":
        return base_loss
    return T.add(base_loss, l1_penalty(tensors, prunable, reg.coefficient))


def regularizer_term(params: ParamStore, reg: RegularizerSpec):
    """``extra_loss`` callback for :func:`loss_and_grad`, or ``None``."""
    if reg.kind == "none" or reg.coefficient == 0.0:
        return None
    names = params.prunable_names
    return lambda tensors: l1_penalty(tensors, names, reg.coefficient)
