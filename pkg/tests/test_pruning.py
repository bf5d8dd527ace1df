import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatcomp._binio import FormatError, TruncatedError, VersionError
from flatcomp.datasets import TaskSpec, generate
from flatcomp.models import ModelSpec, build_model
from flatcomp.pruning import (Mask, MaskError, PruneSchedule, Ticket, apply_mask, imp_run,
                              load_mask, magnitude_mask, oneshot_prune_eval, random_mask,
                              save_mask, standard_prune_run, target_count, transfer_ticket)
from flatcomp.training import TrainConfig
from oracles import brute_force_mask

SMALL_MLP = ModelSpec(layer_sizes=(2, 8, 8, 2))


def run_with_audit(kind: str, spec: ModelSpec, task: TaskSpec, epochs: int = 2, seed: int = 0):
    """Run IMP or standard pruning; return the run and the masked values seen at every evaluation."""
    import flatcomp.pruning as P
    data = generate(task)
    current = {"keep": None}
    audits = []
    real_train = P.train

    def spy(start, data_, cfg_, seed_, keep=None, on_eval=None):
        current["keep"] = keep
        return real_train(start, data_, cfg_, seed_, keep=keep, on_eval=on_eval)

    def on_eval(epoch, params):
        if current["keep"] is not None:
            audits.append(params.flat[current["keep"] == 0].copy())

    fn = imp_run if kind == "imp" else standard_prune_run
    mode = "imp-rewind" if kind == "imp" else "standard"
    P.train = spy
    try:
        run = fn(data, build_model(spec), TrainConfig(epochs=epochs), PruneSchedule(mode), seed, on_eval=on_eval)
    finally:
        P.train = real_train
    return run, audits


def check_sparsity_schedule(run, prunable: int) -> list[str]:
    """Problems with per-iteration sparsity and monotone zero-sets (empty when fine)."""
    problems = []
    prev = np.zeros(prunable, dtype=bool)
    for k, row in enumerate(run.rows, start=1):
        zeros = row.ticket.mask.prunable_vector() == 0
        if abs(int(zeros.sum()) - 0.1 * k * prunable) > 1:
            problems.append(f"iteration {k}: {int(zeros.sum())} zeros, want {0.1 * k * prunable:.1f}")
        if np.any(prev & ~zeros):
            problems.append(f"iteration {k}: a pruned weight came back")
        prev = zeros
    return problems


def mask_matches_oracle(seed: int) -> bool:
    gen = np.random.default_rng(seed)
    spec = ModelSpec(layer_sizes=(int(gen.integers(1, 5)), int(gen.integers(2, 20)),
                                  int(gen.integers(2, 20)), 2), init_seed=seed)
    params = build_model(spec)
    prun = np.concatenate([params[n].ravel() for n in params.prunable_names])
    # inject ties so the tie-break is exercised
    if gen.random() < 0.5:
        prun = np.round(prun, 1)
        off = 0
        for n in params.prunable_names:
            size = params[n].size
            params[n][...] = prun[off:off + size].reshape(params[n].shape)
            off += size
    current = Mask.ones(params)
    if gen.random() < 0.5:
        current = random_mask(params, float(gen.uniform(0, 0.5)), seed)
    target = float(gen.uniform(current.sparsity, 1.0))
    got = magnitude_mask(params, current, target).prunable_vector()
    want = brute_force_mask(prun, current.prunable_vector(), target_count(target, prun.size))
    return params.size <= 1000 and np.array_equal(got, want)


def test_magnitude_mask_matches_brute_force_sort():
    assert all(mask_matches_oracle(seed) for seed in range(200))


def test_target_count_rounds_half_up():
    assert target_count(0.5, 3) == 2
    assert target_count(0.1, 25) == 3
    assert target_count(0.3, 10) == 3


def test_magnitude_mask_never_revives():
    params = build_model(SMALL_MLP)
    m1 = magnitude_mask(params, Mask.ones(params), 0.3)
    params.flat[:] = np.random.default_rng(0).normal(size=params.size)
    m2 = magnitude_mask(params, m1, 0.5)
    assert np.all(m2.prunable_vector() <= m1.prunable_vector())
    with pytest.raises(MaskError):
        magnitude_mask(params, m2, 0.2)
    with pytest.raises(MaskError):
        magnitude_mask(params, m2, 1.5)


def test_random_mask_is_exact_and_seeded():
    params = build_model(SMALL_MLP)
    a, b = random_mask(params, 0.6, 3), random_mask(params, 0.6, 3)
    assert a == b and a != random_mask(params, 0.6, 4)
    assert a.zero_count == target_count(0.6, params.prunable_count)


def test_apply_mask_zeroes_only_pruned_prunables():
    params = build_model(SMALL_MLP)
    mask = random_mask(params, 0.5, 0)
    before = params.copy()
    apply_mask(params, mask)
    keep = mask.keep_vector()
    assert np.all(params.flat[keep == 0] == 0)
    assert np.array_equal(params.flat[keep == 1], before.flat[keep == 1])


def test_mask_rejects_foreign_spec():
    with pytest.raises(MaskError):
        apply_mask(build_model(ModelSpec()), Mask.ones(SMALL_MLP))


# ---------------------------------------------------------------------------
# iterative schedules


@pytest.mark.parametrize("kind", ["imp", "standard"])
def test_iterative_runs_hit_the_schedule(kind):
    run, audits = run_with_audit(kind, SMALL_MLP, TaskSpec("moons", n_train=200))
    assert [round(r.sparsity, 2) for r in run.rows] == [round(0.1 * k, 2) for k in range(1, 10)]
    assert check_sparsity_schedule(run, build_model(SMALL_MLP).prunable_count) == []
    assert audits and all(np.all(a == 0.0) for a in audits)
    for row in run.rows:
        assert np.all(row.checkpoint.flat[row.ticket.mask.keep_vector() == 0] == 0)


def test_imp_rewinds_to_init():
    run, _ = run_with_audit("imp", SMALL_MLP, TaskSpec("moons", n_train=100), epochs=1)
    init = build_model(SMALL_MLP)
    for row in run.rows:
        assert row.ticket.init.same_values(init)


def test_schedule_validation():
    with pytest.raises(ValueError):
        PruneSchedule("magic")
    with pytest.raises(ValueError):
        PruneSchedule("imp-rewind", 0.2, 9)
    with pytest.raises(ValueError):
        imp_run(None, None, None, PruneSchedule("standard"), 0)


def test_oneshot_prunes_without_retraining():
    data = generate(TaskSpec("moons", n_train=100))
    params = build_model(SMALL_MLP)
    out = oneshot_prune_eval(params, [0.0, 0.5, 0.9], data)
    assert [round(s, 2) for s, _ in out] == [0.0, 0.5, 0.9]
    assert params.same_values(build_model(SMALL_MLP))
    with pytest.raises(ValueError):
        oneshot_prune_eval(params, [0.5, 0.1], data)


# ---------------------------------------------------------------------------
# tickets and file formats


def test_ticket_round_trip(tmp_path):
    params = build_model(SMALL_MLP)
    t = Ticket(random_mask(params, 0.4, 1), params, {"task": "moons"})
    manifest = t.save(tmp_path, "t")
    back = Ticket.load(manifest)
    assert back.mask == t.mask and back.init.same_values(params)
    assert json.loads(manifest.read_text())["provenance"] == {"task": "moons"}


def test_ticket_missing_artifact(tmp_path):
    with pytest.raises(FileNotFoundError):
        Ticket.load(tmp_path / "nope.ticket.json")


def test_ticket_spec_mismatch():
    with pytest.raises(MaskError):
        Ticket(Mask.ones(SMALL_MLP), build_model(ModelSpec()))


def test_transfer_checks_compatibility():
    t = Ticket(Mask.ones(SMALL_MLP), build_model(SMALL_MLP))
    with pytest.raises(ValueError, match="sequences"):
        transfer_ticket(t, generate(TaskSpec("seq-parity", n_train=10, n_val=10, n_test=10)),
                        TrainConfig(epochs=1), 0)
    acc, trained = transfer_ticket(t, generate(TaskSpec("rings", n_train=50)), TrainConfig(epochs=1), 0)
    assert 0 <= acc <= 1


def test_mask_file_round_trip_and_errors(tmp_path):
    mask = random_mask(build_model(ModelSpec(kind="transformer", d_model=8, d_ff=8)), 0.37, 2)
    path = save_mask(mask, tmp_path / "m.fmsk")
    assert load_mask(path) == mask
    raw = path.read_bytes()
    bad = bytearray(raw)
    bad[4] = ord("2")
    (tmp_path / "v.fmsk").write_bytes(bytes(bad))
    with pytest.raises(VersionError):
        load_mask(tmp_path / "v.fmsk")
    (tmp_path / "t.fmsk").write_bytes(raw[:-9])
    with pytest.raises(TruncatedError):
        load_mask(tmp_path / "t.fmsk")
    with pytest.raises(FormatError):
        Mask.from_bytes(b"XXXX1" + raw[5:])


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_mask_bytes_round_trip_property(s, seed):
    mask = random_mask(SMALL_MLP, s, seed)
    assert Mask.from_bytes(mask.to_bytes()) == mask


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.integers(0, 1000))
def test_iterated_magnitude_masks_are_nested(targets, seed):
    params = build_model(ModelSpec(layer_sizes=(2, 6, 6, 2), init_seed=seed))
    mask = Mask.ones(params)
    for t in sorted(targets):
        new = magnitude_mask(params, mask, t)
        assert np.all(new.prunable_vector() <= mask.prunable_vector())
        assert new.zero_count == max(mask.zero_count, target_count(t, params.prunable_count))
        mask = new
