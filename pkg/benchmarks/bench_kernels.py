"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 7]

Times the masked Adam update, the int8 GEMM and one end-to-end training step
(forward, backward, update) of the acceptance MLP and transformer under each
backend, and checks the outputs agree bit for bit.
"""

from __future__ import annotations

import argparse
import contextlib
import timeit

import numpy as np

from flatcomp import kernels
from flatcomp.datasets import TaskSpec, batches, generate
from flatcomp.models import ModelSpec, build_model, loss_and_grad
from flatcomp.optim import AdamState, adam_step
from flatcomp.pruning import random_mask


@contextlib.contextmanager
def backend(mod):
    saved = kernels.adam_update, kernels.qgemm
    kernels.adam_update, kernels.qgemm = mod.adam_update, mod.qgemm
    try:
        yield
    finally:
        kernels.adam_update, kernels.qgemm = saved


def best_of(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_adam(mod, n: int, repeat: int) -> tuple[float, np.ndarray]:
    rng = np.random.default_rng(0)
    w0, g = rng.normal(size=n), rng.normal(size=n)
    keep = (rng.random(n) > 0.5).astype(np.uint8)
    w, m, v = w0.copy(), np.zeros(n), np.zeros(n)

    def step():
        mod.adam_update(w, g, m, v, keep, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001, 0.0)

    t = best_of(step, repeat, 20)
    w[:], m[:], v[:] = w0, 0.0, 0.0
    step()
    return t, w.copy()


def bench_qgemm(mod, shape: tuple[int, int, int], repeat: int) -> tuple[float, np.ndarray]:
    rng = np.random.default_rng(1)
    m, k, n = shape
    a = rng.integers(-128, 128, size=(m, k), dtype=np.int8)
    b = rng.integers(-127, 128, size=(k, n), dtype=np.int8)
    t = best_of(lambda: mod.qgemm(a, 3, b), repeat, 10)
    return t, mod.qgemm(a, 3, b)


def bench_step(mod, kind: str, repeat: int) -> tuple[float, np.ndarray]:
    if kind == "mlp":
        task, spec = TaskSpec("moons", n_train=256), ModelSpec()
    else:
        task, spec = TaskSpec("seq-majority", n_train=256), ModelSpec(kind="transformer")
    data = generate(task)
    batch = next(batches(data.train, 32, shuffle_seed=0))
    params0 = build_model(spec)
    keep = random_mask(params0, 0.5, seed=0).keep_vector()

    def step(params, state):
        _, grad, _ = loss_and_grad(params, batch)
        adam_step(params, grad, state, keep=keep)

    with backend(mod):
        params, state = params0.copy(), AdamState.for_params(params0)
        t = best_of(lambda: step(params, state), repeat, 5)
        params, state = params0.copy(), AdamState.for_params(params0)
        for _ in range(3):
            step(params, state)
    return t, params.flat.copy()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if kernels.compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    cases = [
        ("adam_update n=10k", lambda mod: bench_adam(mod, 10_000, args.repeat)),
        ("adam_update n=1M", lambda mod: bench_adam(mod, 1_000_000, args.repeat)),
        ("qgemm 32x64x64", lambda mod: bench_qgemm(mod, (32, 64, 64), args.repeat)),
        ("qgemm 256x256x256", lambda mod: bench_qgemm(mod, (256, 256, 256), args.repeat)),
        ("train step mlp", lambda mod: bench_step(mod, "mlp", args.repeat)),
        ("train step transformer", lambda mod: bench_step(mod, "transformer", args.repeat)),
    ]
    print(f"{'case':<26}{'python (ms)':>13}{'compiled (ms)':>15}{'speedup':>9}  identical")
    for name, fn in cases:
        t_py, out_py = fn(kernels.fallback)
        t_c, out_c = fn(kernels.compiled)
        same = np.array_equal(out_py, out_c)
        print(f"{name:<26}{t_py * 1e3:>13.3f}{t_c * 1e3:>15.3f}{t_py / t_c:>8.2f}x  {same}")


if __name__ == "__main__":
    main()
