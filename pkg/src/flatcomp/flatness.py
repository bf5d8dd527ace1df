"""Flatness measurements: epsilon-sharpness in a random subspace and loss contours."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .models import Batch, ParamStore, evaluate, loss_and_grad
from .seeding import rng

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class SharpnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class SharpnessConfig:
    epsilon: float = 1e-3
    max_dim: int = 100
    projection_seed: int = 0
    steps: int = 30
    restarts: int = 3
    step_frac: float = 0.1
    start_seed: int = 0

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.steps < 1 or self.restarts < 1 or self.max_dim < 1:
            raise ValueError("steps, restarts and max_dim must be >= 1")

    def dim(self, n: int) -> int:
        return min(n, self.max_dim)


EPSILON_GRID = (5e-3, 1e-3, 5e-4)


@dataclass
class ProjectionBasis:
    """Random ``n x p`` basis with unit columns and its least-squares pseudo-inverse."""

    A: np.ndarray
    pinv: np.ndarray

    @classmethod
    def random(cls, n: int, p: int, seed: int) -> "ProjectionBasis":
        if not 1 <= p <= n:
            raise ValueError(f"subspace dimension must satisfy 1 <= p <= n (p={p}, n={n})")
        A = rng(seed, "projection").standard_normal((n, p))
        A /= np.linalg.norm(A, axis=0, keepdims=True)
        return cls.from_matrix(A)

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> "ProjectionBasis":
        A = np.ascontiguousarray(A, dtype=np.float64)
        q, r = np.linalg.qr(A)
        return cls(A, np.linalg.solve(r, q.T))

    def coords(self, w: np.ndarray) -> np.ndarray:
        return self.pinv @ w


class SharpnessResult(NamedTuple):
    phi: float
    f_w: float
    f_max: float
    z_best: np.ndarray


def sharpness_metric(w: np.ndarray, objective: Objective, cfg: SharpnessConfig,
                     basis: ProjectionBasis | None = None,
                     z_init: np.ndarray | None = None) -> SharpnessResult:
    """``100 (max_{z in C_eps} f(w + A z) - f(w)) / (1 + f(w))``.

    The box has half-widths ``eps (|A^+ w| + 1)``. The maximum is searched by
    sign-gradient ascent projected onto the box, from ``z = 0``, from
    ``z_init`` when given, and from random points in the box; the best value
    seen anywhere is kept.
    """
    w = np.asarray(w, dtype=np.float64)
    if basis is None:
        basis = ProjectionBasis.random(w.size, cfg.dim(w.size), cfg.projection_seed)
    A = basis.A
    half = cfg.epsilon * (np.abs(basis.coords(w)) + 1.0)
    f_w, _ = objective(w)
    if not math.isfinite(f_w):
        raise SharpnessError("sharpness: f(w) is not finite")

    gen = rng(cfg.start_seed, "sharpness-starts")
    starts = [np.zeros(A.shape[1])]
    if z_init is not None:
        starts.append(np.clip(np.asarray(z_init, dtype=np.float64), -half, half))
    for _ in range(cfg.restarts - 1):
        starts.append(gen.uniform(-half, half))

    best_f, best_z = f_w, starts[0]
    for z in starts:
        z = z.copy()
        for it in range(cfg.steps + 1):
            f, g = objective(w + A @ z)
            if not math.isfinite(f):
                raise SharpnessError(f"sharpness: non-finite loss at z={z.tolist()}")
            if f > best_f:
                best_f, best_z = f, z.copy()
            if it == cfg.steps:
                break
            z = np.clip(z + cfg.step_frac * half * np.sign(A.T @ g), -half, half)
    phi = 100.0 * (best_f - f_w) / (1.0 + f_w)
    return SharpnessResult(phi, f_w, best_f, best_z)


def model_objective(params: ParamStore, batch: Batch, loss_kind: str = "cross-entropy") -> Objective:
    """Loss and gradient of the model as a function of the flat parameter vector."""
    work = params.copy()

    def objective(w: np.ndarray) -> tuple[float, np.ndarray]:
        work.flat[:] = w
        loss, g, _ = loss_and_grad(work, batch, loss_kind)
        return loss, g

    return objective


def model_sharpness(params: ParamStore, batch: Batch, cfg: SharpnessConfig,
                    loss_kind: str = "cross-entropy") -> SharpnessResult:
    return sharpness_metric(params.flat.copy(), model_objective(params, batch, loss_kind), cfg)


class SharpnessRow(NamedTuple):
    epsilon: float
    optimizer: str
    mean: float
    stddev: float
    n: int


def sharpness_table(runs: Sequence[tuple[str, ParamStore]], batch: Batch,
                    epsilons: Sequence[float] = EPSILON_GRID, base: SharpnessConfig | None = None,
                    loss_kind: str = "cross-entropy") -> tuple[list[SharpnessRow], list[tuple[str, float, float]]]:
    """Per-(optimizer, eps) mean and sample stddev of phi over the given runs.

    Returns ``(summary_rows, raw)`` where ``raw`` holds ``(optimizer, eps, phi)``.
    """
    base = base or SharpnessConfig()
    raw: list[tuple[str, float, float]] = []
    for label, params in runs:
        for eps in epsilons:
            cfg = SharpnessConfig(eps, base.max_dim, base.projection_seed, base.steps, base.restarts,
                                  base.step_frac, base.start_seed)
            raw.append((label, eps, model_sharpness(params, batch, cfg, loss_kind).phi))
    rows = []
    labels = list(dict.fromkeys(r[0] for r in raw))
    for eps in epsilons:
        for label in labels:
            vals = np.array([phi for lab, e, phi in raw if lab == label and e == eps])
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            rows.append(SharpnessRow(eps, label, float(vals.mean()), sd, int(vals.size)))
    return rows, raw


# ---------------------------------------------------------------------------
# contours


@dataclass
class ContourSpec:
    w_init: ParamStore
    w_a: ParamStore
    w_b: ParamStore
    resolution: int = 21
    alpha_range: tuple[float, float] = (-0.5, 1.5)
    beta_range: tuple[float, float] = (-0.5, 1.5)
    head_source: str = "a"

    def __post_init__(self) -> None:
        if self.resolution < 2:
            raise ValueError("contour resolution must be >= 2")
        if self.head_source not in ("a", "b"):
            raise ValueError("head_source must be 'a' or 'b'")
        if not (self.w_init.spec == self.w_a.spec == self.w_b.spec):
            raise ValueError("contour anchors must share one ModelSpec")


@dataclass
class ContourGrid:
    alphas: np.ndarray
    betas: np.ndarray
    loss: np.ndarray  # shape (len(betas), len(alphas))
    anchors: dict[str, tuple[float, float]] = field(default_factory=dict)
    head_source: str = "a"


def head_names(params: ParamStore) -> list[str]:
    return [n for n in params.names() if n.startswith("head.")]


def _axis(lo: float, hi: float, res: int) -> np.ndarray:
    ax = np.linspace(lo, hi, res)
    for anchor in (0.0, 1.0):
        ax[np.abs(ax - anchor) < 1e-9] = anchor
    return ax


def contour_plane(spec: ContourSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(body selector, u, v, head values) for the plane through the three anchors."""
    body = np.ones(spec.w_init.size, dtype=bool)
    for n in head_names(spec.w_init):
        body[spec.w_init.slice(n)] = False
    u = np.where(body, spec.w_a.flat - spec.w_init.flat, 0.0)
    un = float(np.linalg.norm(u))
    if un == 0.0:
        raise ValueError("contour: w_a equals w_init on the non-head parameters")
    d = np.where(body, spec.w_b.flat - spec.w_init.flat, 0.0)
    v = d - (np.dot(d, u) / un ** 2) * u
    vn = float(np.linalg.norm(v))
    if vn <= 1e-10 * un:
        raise ValueError("contour: anchors are collinear")
    v *= un / vn
    src = spec.w_a if spec.head_source == "a" else spec.w_b
    return body, u, v, src.flat


def contour_grid(spec: ContourSpec, loss_fn: Callable[[ParamStore], float]) -> ContourGrid:
    """Loss over ``(1 - a) w_init + a w_a + b v`` with the classifier head held fixed."""
    body, u, v, head_vals = contour_plane(spec)
    alphas = _axis(*spec.alpha_range, spec.resolution)
    betas = _axis(*spec.beta_range, spec.resolution)
    loss = np.empty((betas.size, alphas.size))
    work = spec.w_init.copy()
    for i, b in enumerate(betas):
        for j, a in enumerate(alphas):
            pt = (1.0 - a) * spec.w_init.flat + a * spec.w_a.flat + b * v
            work.flat[:] = np.where(body, pt, head_vals)
            loss[i, j] = loss_fn(work)
    un2 = float(np.dot(u, u))
    d = np.where(body, spec.w_b.flat - spec.w_init.flat, 0.0)
    a_b = float(np.dot(d, u) / un2)
    b_b = float(np.linalg.norm(d - a_b * u) / math.sqrt(un2))
    anchors = {"init": (0.0, 0.0), "a": (1.0, 0.0), "b": (a_b, b_b)}
    return ContourGrid(alphas, betas, loss, anchors, spec.head_source)


def eval_loss_fn(batch: Batch, loss_kind: str = "cross-entropy") -> Callable[[ParamStore], float]:
    return lambda ps: evaluate(ps, batch, loss_kind)[0]


def basin_area(grid: ContourGrid, anchor: str, delta: float = 0.1) -> float:
    """Area of the connected sub-level set ``loss <= loss(anchor cell) + delta`` around ``anchor``."""
    a, b = grid.anchors[anchor]
    j = int(np.argmin(np.abs(grid.alphas - a)))
    i = int(np.argmin(np.abs(grid.betas - b)))
    thresh = grid.loss[i, j] + delta
    seen = np.zeros(grid.loss.shape, dtype=bool)
    seen[i, j] = True
    todo = deque([(i, j)])
    while todo:
        ci, cj = todo.popleft()
        for ni, nj in ((ci + 1, cj), (ci - 1, cj), (ci, cj + 1), (ci, cj - 1)):
            if 0 <= ni < seen.shape[0] and 0 <= nj < seen.shape[1] and not seen[ni, nj] \
                    and grid.loss[ni, nj] <= thresh:
                seen[ni, nj] = True
                todo.append((ni, nj))
    da = (grid.alphas[-1] - grid.alphas[0]) / (grid.alphas.size - 1)
    db = (grid.betas[-1] - grid.betas[0]) / (grid.betas.size - 1)
    return float(seen.sum() * da * db)
