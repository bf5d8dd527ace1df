"""Post-training dynamic int8 quantization.

Linear weight matrices are quantized once (symmetric, per tensor). At
inference every linear input is quantized on the fly (asymmetric, per tensor,
range widened to include zero), multiplied in integers with 32-bit
accumulation, and rescaled to float. Everything else runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from ._binio import FormatError, Writer, atomic_write_bytes, open_sealed
from .models import (LINEAR_ROLES, Batch, ModelSpec, ParamStore, forward_logits, loss_from_logits,
                     metric_from_logits)
from .tensor import NonFiniteError, Tensor, no_grad

FQNT_MAGIC = b"FQNT"
FQNT_VERSION = b"1"
QMAX = 127


@dataclass
class QuantTensor:
    values: np.ndarray  # int8
    scale: float
    zero_point: int
    shape: tuple[int, ...]

    def dequantize(self) -> np.ndarray:
        return self.scale * (self.values.astype(np.float64) - self.zero_point)


def quantize_symmetric(w: np.ndarray) -> QuantTensor:
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise NonFiniteError("quantize: non-finite weight")
    amax = float(np.abs(w).max()) if w.size else 0.0
    scale = amax / QMAX if amax > 0 else 1.0
    q = np.clip(np.rint(w / scale), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, scale, 0, w.shape)


def quantize_activation(x: np.ndarray) -> QuantTensor:
    """Asymmetric per-tensor int8 with the observed range widened to contain 0."""
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    if hi == lo:
        scale, zp = 1.0, 0
    else:
        scale = (hi - lo) / 255.0
        zp = int(np.clip(-128 - np.rint(lo / scale), -128, 127))
    q = np.clip(np.rint(x / scale) + zp, -128, 127).astype(np.int8)
    return QuantTensor(q, scale, zp, x.shape)


def quantized_linear(x: np.ndarray, qw: QuantTensor, bias: np.ndarray | None) -> np.ndarray:
    """``x @ dequant(W) + b`` through an int8 x int8 -> int32 GEMM."""
    lead, k = x.shape[:-1], x.shape[-1]
    qa = quantize_activation(np.ascontiguousarray(x.reshape(-1, k)))
    acc = kernels.qgemm(qa.values, qa.zero_point, np.ascontiguousarray(qw.values))
    out = acc.astype(np.float64) * (qa.scale * qw.scale)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, qw.shape[1])


@dataclass
class QuantizedModel:
    spec: ModelSpec
    names: list[str]
    qweights: dict[str, QuantTensor]
    floats: dict[str, np.ndarray]

    def dequantized_params(self) -> ParamStore:
        ps = ParamStore(self.spec)
        for name in self.names:
            ps[name][...] = self.qweights[name].dequantize() if name in self.qweights else self.floats[name]
        return ps

    # .fqnt
    def to_bytes(self) -> bytes:
        w = Writer(FQNT_MAGIC + FQNT_VERSION)
        w.string(self.spec.to_json())
        w.u32(len(self.names))
        for name in self.names:
            w.string(name)
            if name in self.qweights:
                q = self.qweights[name]
                w.u8(1)
                w.shape(q.shape)
                w.f64(q.scale)
                w.i32(q.zero_point)
                w.raw(q.values.astype(np.int8).tobytes())
            else:
                arr = self.floats[name]
                w.u8(0)
                w.shape(arr.shape)
                w.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return w.sealed()

    @classmethod
    def from_bytes(cls, raw: bytes, what: str = "quantized model") -> "QuantizedModel":
        r = open_sealed(raw, FQNT_MAGIC, FQNT_VERSION, what)
        spec = ModelSpec.from_dict(json.loads(r.string()))
        names, qw, fl = [], {}, {}
        for _ in range(r.u32()):
            name = r.string()
            kind = r.u8()
            shape = r.shape()
            n = int(np.prod(shape, dtype=np.int64))
            if kind == 1:
                scale, zp = r.f64(), r.i32()
                vals = np.frombuffer(r.take(n), dtype=np.int8).reshape(shape).copy()
                qw[name] = QuantTensor(vals, scale, zp, shape)
            elif kind == 0:
                fl[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
            else:
                raise FormatError(f"{what}: unknown tensor kind {kind}")
            names.append(name)
        if not r.done():
            raise FormatError(f"{what}: trailing bytes")
        if names != ParamStore(spec).names():
            raise FormatError(f"{what}: tensor list does not match the model spec")
        return cls(spec, names, qw, fl)


def save_quantized(qm: QuantizedModel, path: str | Path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, qm.to_bytes())
    return path


def load_quantized(path: str | Path) -> QuantizedModel:
    path = Path(path)
    return QuantizedModel.from_bytes(path.read_bytes(), str(path))


def quantize_weights(params: ParamStore) -> QuantizedModel:
    qw, fl = {}, {}
    for name, arr in params.items():
        if params.role(name) in LINEAR_ROLES:
            qw[name] = quantize_symmetric(arr)
        else:
            fl[name] = arr.copy()
    return QuantizedModel(params.spec, params.names(), qw, fl)


def quant_logits(qm: QuantizedModel, inputs: np.ndarray) -> np.ndarray:
    consts = {n: Tensor(a) for n, a in qm.floats.items()}

    def linear(x: Tensor, prefix: str) -> Tensor:
        return Tensor(quantized_linear(x.data, qm.qweights[prefix + ".weight"], qm.floats[prefix + ".bias"]))

    with no_grad():
        return forward_logits(qm.spec, consts, inputs, linear=linear).data


def quant_forward(qm: QuantizedModel, batch: Batch, loss_kind: str = "cross-entropy") -> tuple[float, float]:
    logits = quant_logits(qm, batch.inputs)
    with no_grad():
        loss = loss_from_logits(Tensor(logits), np.asarray(batch.labels), loss_kind).item()
    return loss, metric_from_logits(logits, np.asarray(batch.labels), loss_kind)


class QuantReport(NamedTuple):
    float_metric: float
    quant_metric: float
    max_logit_divergence: float

    @property
    def drop(self) -> float:
        return self.float_metric - self.quant_metric


def float_logits(params: ParamStore, inputs: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward_logits(params.spec, params.constants(), inputs).data


def quant_report(float_model: ParamStore, qm: QuantizedModel | ParamStore, batch: Batch,
                 loss_kind: str = "cross-entropy") -> QuantReport:
    """Paired evaluation on the same batch; ``qm`` may also be a float ParamStore."""
    labels = np.asarray(batch.labels)
    fl = float_logits(float_model, batch.inputs)
    ql = float_logits(qm, batch.inputs) if isinstance(qm, ParamStore) else quant_logits(qm, batch.inputs)
    return QuantReport(metric_from_logits(fl, labels, loss_kind), metric_from_logits(ql, labels, loss_kind),
                       float(np.abs(fl - ql).max()))
