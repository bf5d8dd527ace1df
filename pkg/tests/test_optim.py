import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatcomp import kernels
from flatcomp.datasets import TaskSpec, batches, generate
from flatcomp.models import ModelSpec, build_model, loss_and_grad
from flatcomp.optim import (AdamState, DivergenceError, RegularizerSpec, SamConfig, SwaState,
                            adam_step, default_loss_grad, regularizer_term, sam_step, swa_schedule,
                            swa_update)
from flatcomp.pruning import random_mask
from flatcomp.training import TrainConfig, train


def reference_adam(w, grads, lr=2e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam, one step per gradient in ``grads``."""
    m, v = np.zeros_like(w), np.zeros_like(w)
    w = w.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def sam_triple(seed: int):
    """A random (model, batch, seed) triple."""
    gen = np.random.default_rng(seed)
    if seed % 2:
        spec = ModelSpec(kind="transformer", d_model=8, d_ff=8, n_layers=1, init_seed=seed)
        task = TaskSpec("seq-majority", n_train=64, n_val=8, n_test=8, seed=seed)
    else:
        spec = ModelSpec(layer_sizes=(2, 8, 8, 2), init_seed=seed)
        task = TaskSpec("moons", n_train=64, seed=seed)
    data = generate(task)
    batch = next(batches(data.train, int(gen.integers(4, 33)), seed))
    return build_model(spec), batch


def test_adam_matches_textbook_reference():
    gen = np.random.default_rng(0)
    ps = build_model(ModelSpec(layer_sizes=(2, 4, 2)))
    grads = [gen.normal(size=ps.size) for _ in range(5)]
    want = reference_adam(ps.flat, grads)
    state = AdamState.for_params(ps)
    for g in grads:
        adam_step(ps, g, state)
    np.testing.assert_allclose(ps.flat, want, rtol=1e-13, atol=1e-15)


def test_adam_leaves_masked_coordinates_alone():
    ps = build_model(ModelSpec())
    keep = random_mask(ps, 0.5, seed=1).keep_vector()
    ps.flat[keep == 0] = 0.0
    state = AdamState.for_params(ps)
    for _ in range(3):
        adam_step(ps, np.ones(ps.size), state, keep=keep)
    assert np.all(ps.flat[keep == 0] == 0.0)
    assert np.all(state.m[keep == 0] == 0.0) and np.all(state.v[keep == 0] == 0.0)


def test_adam_rejects_bad_gradients():
    ps = build_model(ModelSpec())
    with pytest.raises(ValueError):
        adam_step(ps, np.ones(3), AdamState.for_params(ps))
    g = np.zeros(ps.size)
    g[0] = np.nan
    with pytest.raises(ValueError):
        adam_step(ps, g, AdamState.for_params(ps))


@pytest.mark.parametrize("seed", range(20))
def test_sam_with_zero_rho_is_adam(seed):
    params, batch = sam_triple(seed)
    a, b = params.copy(), params.copy()
    sa, sb = AdamState.for_params(a), AdamState.for_params(b)
    fn = default_loss_grad()
    for _ in range(3):
        sam_step(a, batch, fn, SamConfig(0.0), sa)
        _, g, _ = loss_and_grad(b, batch)
        adam_step(b, g, sb)
    assert np.array_equal(a.flat, b.flat)
    assert np.array_equal(sa.m, sb.m) and np.array_equal(sa.v, sb.v)


@pytest.mark.parametrize("seed", range(20))
def test_sam_perturbation_norm_is_rho(seed):
    params, batch = sam_triple(seed)
    info = sam_step(params, batch, default_loss_grad(), SamConfig(0.05), AdamState.for_params(params))
    assert info.grad_norm > 0
    assert abs(info.eps_norm - 0.05) <= 1e-12 * 0.05


def test_sam_analytic_quadratic():
    # f(w) = w^2 / 2 at w = 1, rho = 0.05: eps = 0.05, the gradient consumed is 1.05
    spec = ModelSpec(layer_sizes=(1, 1, 1), n_classes=1)
    ps = build_model(spec)
    ps.flat[:] = 0.0
    ps.flat[0] = 1.0
    seen = []

    def fn(p, batch):
        w = p.flat[0]
        g = np.zeros(p.size)
        g[0] = w
        seen.append(w)
        return 0.5 * w * w, g

    state = AdamState.for_params(ps)
    info = sam_step(ps, None, fn, SamConfig(0.05), state)
    assert seen == [1.0, 1.05]
    assert info.eps_norm == pytest.approx(0.05, rel=1e-15)
    assert state.m[0] == pytest.approx(0.1 * 1.05, rel=1e-15)


def test_sam_masks_perturbation_and_restores_weights():
    params, batch = sam_triple(0)
    keep = random_mask(params, 0.5, seed=0).keep_vector()
    params.flat[keep == 0] = 0.0
    seen = []
    base = default_loss_grad()

    def fn(p, b):
        seen.append(p.flat.copy())
        return base(p, b)

    sam_step(params, batch, fn, SamConfig(0.05), AdamState.for_params(params), keep=keep)
    assert np.all(seen[1][keep == 0] == 0.0)
    assert np.all(params.flat[keep == 0] == 0.0)


def test_sam_reports_divergence_at_perturbed_point():
    params, batch = sam_triple(0)
    calls = []

    def fn(p, b):
        calls.append(1)
        if len(calls) == 2:
            return math.inf, np.zeros(p.size)
        return 1.0, np.ones(p.size)

    before = params.flat.copy()
    with pytest.raises(DivergenceError, match="rho"):
        sam_step(params, batch, fn, SamConfig(0.05), AdamState.for_params(params))
    assert np.array_equal(params.flat, before)


def test_sam_rejects_negative_rho():
    with pytest.raises(ValueError):
        SamConfig(-0.1)


# ---------------------------------------------------------------------------
# SWA


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_swa_running_mean_equals_offline_mean(k, n, seed):
    xs = np.random.default_rng(seed).normal(scale=10, size=(k, n))
    state = SwaState(np.zeros(n))
    for x in xs:
        swa_update(state, x)
    assert state.count == k
    np.testing.assert_allclose(state.mean, xs.mean(axis=0), rtol=1e-12, atol=1e-12)


def test_swa_schedule_takes_the_last_half():
    assert swa_schedule(10, range(1, 11)) == [6, 7, 8, 9, 10]
    assert swa_schedule(20, range(2, 21, 2)) == [12, 14, 16, 18, 20]


def test_swa_schedule_errors():
    with pytest.raises(ValueError):
        swa_schedule(1, [1])
    with pytest.raises(ValueError):
        swa_schedule(10, [10])


def test_swa_shape_mismatch():
    with pytest.raises(ValueError):
        swa_update(SwaState(np.zeros(3)), np.zeros(4))


def test_swa_training_returns_average_of_late_checkpoints():
    data = generate(TaskSpec("moons", n_train=64))
    seen = {}
    cfg = TrainConfig(optimizer="swa", epochs=6)
    res = train(build_model(ModelSpec()), data, cfg, seed=0,
                on_eval=lambda e, p: seen.setdefault(e, p.flat.copy()))
    np.testing.assert_allclose(res.best.flat, np.mean([seen[e] for e in (4, 5, 6)], axis=0),
                               rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# regularizer and training loop


def test_l1_regularizer_adds_sign_gradient_on_prunables_only():
    ps, batch = sam_triple(0)
    reg = RegularizerSpec("l1", 0.01)
    fn_plain = default_loss_grad()
    fn_reg = default_loss_grad(extra_loss=regularizer_term(ps, reg))
    l0, g0 = fn_plain(ps, batch)
    l1, g1 = fn_reg(ps, batch)
    prun = np.concatenate([ps[n].ravel() for n in ps.prunable_names])
    assert l1 - l0 == pytest.approx(0.01 * np.abs(prun).sum(), rel=1e-12)
    diff = g1 - g0
    for name in ps.names():
        d = diff[ps.slice(name)]
        if ps.prunable(name):
            np.testing.assert_allclose(d, 0.01 * np.sign(ps[name].ravel()), atol=1e-15)
        else:
            assert np.all(d == 0)


def test_regularizer_validation():
    with pytest.raises(ValueError):
        RegularizerSpec("l2", 0.1)
    with pytest.raises(ValueError):
        RegularizerSpec("l1", -1.0)


def test_training_is_deterministic_and_keeps_mask():
    data = generate(TaskSpec("moons", n_train=128))
    init = build_model(ModelSpec())
    keep = random_mask(init, 0.3, seed=2).keep_vector()
    cfg = TrainConfig(optimizer="sam", epochs=3)
    a = train(init, data, cfg, seed=7, keep=keep)
    b = train(init, data, cfg, seed=7, keep=keep)
    assert np.array_equal(a.best.flat, b.best.flat) and a.best_epoch == b.best_epoch
    assert np.all(a.final.flat[keep == 0] == 0.0)
    assert np.array_equal(init.flat, build_model(ModelSpec()).flat)


def test_training_improves_moons():
    data = generate(TaskSpec("moons", n_train=500))
    res = train(build_model(ModelSpec()), data, TrainConfig(epochs=20), seed=0)
    assert res.best_val > 0.85
    assert res.history[-1].train_loss < res.history[0].train_loss


def test_best_checkpoint_tie_break_prefers_lower_loss():
    data = generate(TaskSpec("moons", n_train=500, noise=0.0))
    res = train(build_model(ModelSpec()), data, TrainConfig(epochs=30), seed=0)
    top = [h for h in res.history if h.val_metric == res.best_val]
    assert res.best_epoch == min(top, key=lambda h: h.val_loss).epoch


def test_compiled_and_fallback_kernels_agree_bitwise():
    if kernels.compiled is None:
        pytest.skip("compiled extension not built")
    gen = np.random.default_rng(3)
    for n in (1, 7, 1000):
        w, g = gen.normal(size=n), gen.normal(size=n)
        keep = (gen.random(n) > 0.3).astype(np.uint8)
        outs = []
        for mod in (kernels.fallback, kernels.compiled):
            for k in (None, keep):
                ww, m, v = w.copy(), np.full(n, 0.1), np.full(n, 0.2)
                mod.adam_update(ww, g, m, v, k, 1e-3, 0.9, 0.999, 1e-8, 0.3, 0.01, 0.05)
                outs.append((ww, m, v))
        for a, b in zip(outs[:2], outs[2:]):
            for x, y in zip(a, b):
                assert np.array_equal(x, y)
