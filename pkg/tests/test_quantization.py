import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flatcomp import kernels
from flatcomp._binio import TruncatedError, VersionError
from flatcomp.datasets import TaskSpec, generate
from flatcomp.models import ModelSpec, build_model
from flatcomp.quantization import (QuantizedModel, float_logits, load_quantized, quant_logits,
                                   quant_report, quantize_activation, quantize_symmetric,
                                   quantize_weights, quantized_linear, save_quantized)

FINITE = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def random_tensors(n: int = 1000):
    gen = np.random.default_rng(11)
    for i in range(n):
        shape = tuple(int(s) for s in gen.integers(1, 9, size=int(gen.integers(1, 3))))
        yield gen.normal(scale=10 ** gen.uniform(-4, 3), size=shape) * (gen.random(shape) > 0.1 * (i % 3))


def roundtrip_ok(w: np.ndarray) -> bool:
    q = quantize_symmetric(w)
    return bool(np.all(np.abs(q.dequantize() - w) <= q.scale / 2 * (1 + 1e-12)))


def test_weight_roundtrip_error_is_at_most_half_a_step():
    assert all(roundtrip_ok(w) for w in random_tensors())


def test_activation_roundtrip_error_is_at_most_half_a_step():
    for x in random_tensors():
        q = quantize_activation(x)
        assert np.all(np.abs(q.dequantize() - x) <= q.scale / 2 * (1 + 1e-9))


def test_symmetric_reference_values():
    q = quantize_symmetric(np.array([-1.0, 0.5, 1.0]))
    assert q.values.tolist() == [-127, 64, 127] and q.scale == 1 / 127 and q.zero_point == 0
    # round half to even on exact midpoints
    q = quantize_symmetric(np.array([127.0, 0.5, 1.5, -2.5]))
    assert q.values.tolist() == [127, 0, 2, -2]


def test_zero_tensor():
    q = quantize_symmetric(np.zeros((2, 2)))
    assert np.all(q.values == 0) and np.all(q.dequantize() == 0)
    a = quantize_activation(np.zeros(3))
    assert np.all(a.dequantize() == 0)


def test_activation_range_contains_zero_exactly():
    for x in (np.array([2.0, 3.0]), np.array([-5.0, -1.0]), np.array([-1.0, 4.0])):
        q = quantize_activation(np.append(x, 0.0))
        assert q.dequantize()[-1] == 0.0
        assert -128 <= q.zero_point <= 127
        assert q.dequantize().min() <= min(x.min(), 0) + q.scale / 2


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=FINITE))
def test_quantization_is_idempotent(w):
    q1 = quantize_symmetric(w)
    q2 = quantize_symmetric(q1.dequantize())
    assert np.array_equal(q1.values, q2.values)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=FINITE))
def test_codes_stay_in_range(w):
    q = quantize_symmetric(w)
    assert q.values.dtype == np.int8 and np.all(np.abs(q.values.astype(int)) <= 127)


def integer_gemm_is_exact(seed: int) -> bool:
    gen = np.random.default_rng(seed)
    m, k, n = (int(s) for s in gen.integers(1, 65, size=3))
    a = gen.integers(-128, 128, size=(m, k), dtype=np.int8)
    b = gen.integers(-127, 128, size=(k, n), dtype=np.int8)
    zp = int(gen.integers(-128, 128))
    acc = kernels.qgemm(a, zp, b)
    exact = (a.astype(np.float64) - zp) @ b.astype(np.float64)  # integers < 2**53: exact in float64
    return acc.dtype == np.int32 and np.array_equal(acc.astype(np.float64), exact)


def test_integer_matmul_equals_float_matmul_of_codes():
    assert all(integer_gemm_is_exact(seed) for seed in range(200))


def test_worst_case_accumulator_does_not_saturate():
    k = 512
    a = np.full((1, k), -128, dtype=np.int8)
    b = np.full((k, 1), -127, dtype=np.int8)
    acc = kernels.qgemm(a, 127, b)
    assert int(acc[0, 0]) == k * 255 * 127


def test_oversized_inner_dimension_is_refused():
    with pytest.raises(OverflowError):
        kernels.fallback.qgemm(np.zeros((1, 70000), np.int8), 0, np.zeros((70000, 1), np.int8))


def test_quantized_linear_matches_dequantized_float_matmul():
    gen = np.random.default_rng(4)
    for _ in range(50):
        x = gen.normal(size=(int(gen.integers(1, 8)), 16))
        w = gen.normal(size=(16, 5))
        b = gen.normal(size=5)
        qw = quantize_symmetric(w)
        qa = quantize_activation(x)
        want = qa.dequantize() @ qw.dequantize() + b
        np.testing.assert_allclose(quantized_linear(x, qw, b), want, rtol=1e-12, atol=1e-12)


def test_compiled_and_fallback_qgemm_agree():
    if kernels.compiled is None:
        pytest.skip("compiled extension not built")
    gen = np.random.default_rng(5)
    for _ in range(20):
        a = gen.integers(-128, 128, size=(7, 33), dtype=np.int8)
        b = gen.integers(-127, 128, size=(33, 9), dtype=np.int8)
        assert np.array_equal(kernels.fallback.qgemm(a, -3, b), kernels.compiled.qgemm(a, -3, b))


@pytest.mark.parametrize("spec,task", [
    (ModelSpec(), TaskSpec("moons", n_train=50)),
    (ModelSpec(kind="transformer", d_model=8, d_ff=16), TaskSpec("seq-majority", n_train=50)),
])
def test_quantized_model_tracks_float_model(spec, task):
    params = build_model(spec)
    batch = generate(task).val.batch()
    qm = quantize_weights(params)
    assert set(qm.qweights) == {n for n in params.names() if n.endswith(".weight") and
                                params.role(n) in ("weight", "head")}
    fl, ql = float_logits(params, batch.inputs), quant_logits(qm, batch.inputs)
    assert np.abs(fl - ql).max() < 0.1 * np.abs(fl).max() + 1e-3
    rep = quant_report(params, qm, batch)
    assert rep.drop == rep.float_metric - rep.quant_metric
    assert quant_report(params, params, batch).max_logit_divergence == 0.0


def test_quantized_file_round_trip_and_errors(tmp_path):
    qm = quantize_weights(build_model(ModelSpec(kind="transformer", d_model=8, d_ff=8)))
    path = save_quantized(qm, tmp_path / "m.fqnt")
    back = load_quantized(path)
    assert isinstance(back, QuantizedModel)
    for n, q in qm.qweights.items():
        assert np.array_equal(back.qweights[n].values, q.values) and back.qweights[n].scale == q.scale
    raw = path.read_bytes()
    bad = bytearray(raw)
    bad[4] = ord("7")
    with pytest.raises(VersionError):
        QuantizedModel.from_bytes(bytes(bad))
    with pytest.raises(TruncatedError):
        QuantizedModel.from_bytes(raw[:len(raw) // 2])
