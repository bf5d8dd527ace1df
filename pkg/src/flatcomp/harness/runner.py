"""Run an experiment config over its (optimizer, seed) grid and persist the results.

Every job is a pure function of (config, optimizer, seed); randomness is
derived from the seed with purpose tags. Jobs may run in worker processes
(``FLATCOMP_THREADS``); records are merged in a fixed order so that
``records.csv`` is byte-identical between runs. Wall-clock times go to
``timings.csv`` instead.
"""

from __future__ import annotations

import csv
import io
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .._binio import atomic_write_text
from ..datasets import TRANSFER_PAIRS, TaskData, generate
from ..flatness import (ContourSpec, SharpnessConfig, basin_area, contour_grid, eval_loss_fn,
                        model_sharpness)
from ..models import ParamStore, build_model, evaluate, save_checkpoint
from ..pruning import Ticket, imp_run, oneshot_prune_eval, random_mask, save_mask, standard_prune_run, \
    transfer_ticket
from ..quantization import quant_report, quantize_weights, save_quantized
from ..seeding import derive_seed
from ..structured import DistillPair, structured_prune_train
from ..training import train
from . import svg
from .config import ExperimentConfig


@dataclass
class RunRecord:
    config_hash: str
    pipeline: str
    task: str
    optimizer: str
    seed: int
    stage: str
    step: int
    sparsity: float
    val_metric: float
    test_metric: float
    phi: str = ""
    extra: str = ""
    checkpoint: str = ""
    mask: str = ""
    status: str = "ok"


RECORD_FIELDS = [f.name for f in fields(RunRecord)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in RECORD_FIELDS])
    return buf.getvalue()


def read_records(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _kv(d: dict) -> str:
    return ";".join(f"{k}={_fmt(v)}" for k, v in d.items())


def parse_kv(s: str) -> dict[str, str]:
    return dict(item.split("=", 1) for item in s.split(";") if item)


def model_seed(seed: int) -> int:
    return derive_seed(seed, "init") >> 1  # fits a signed 64-bit int


class _Job:
    """Context for one (optimizer, seed) job."""

    def __init__(self, cfg: ExperimentConfig, optimizer: str, seed: int, out: Path):
        self.cfg, self.optimizer, self.seed, self.out = cfg, optimizer, seed, out
        self.dir = out / optimizer / f"seed{seed}"
        self.records: list[RunRecord] = []
        self.hash = cfg.hash()

    def rel(self, path: Path) -> str:
        return path.relative_to(self.out).as_posix()

    def add(self, stage: str, sparsity: float, val: float, test: float, *, task: str | None = None,
            optimizer: str | None = None, phi: str = "", extra: dict | None = None, checkpoint: str = "",
            mask: str = "") -> None:
        self.records.append(RunRecord(self.hash, self.cfg.pipeline, task or self.cfg["task"]["generator"],
                                      optimizer or self.optimizer, self.seed, stage, len(self.records),
                                      float(sparsity), float(val), float(test), phi, _kv(extra or {}),
                                      checkpoint, mask))

    def data(self, generator: str | None = None) -> TaskData:
        return generate(self.cfg.task_spec(generator))

    def init(self) -> ParamStore:
        return build_model(self.cfg.model_spec(model_seed(self.seed)))

    def split(self, data: TaskData, name: str):
        return getattr(data, name).batch()

    def train(self, data: TaskData, optimizer: str | None = None, init: ParamStore | None = None):
        return train(init if init is not None else self.init(), data,
                     self.cfg.train_config(optimizer or self.optimizer), derive_seed(self.seed, "train"))


def _test_metric(params: ParamStore, data: TaskData, loss_kind: str) -> float:
    return evaluate(params, data.test.batch(), loss_kind)[1]


def pipe_train(job: _Job) -> None:
    data = job.data()
    res = job.train(data)
    ck = save_checkpoint(res.best, job.dir / "model.fcpt", {"seed": job.seed, "optimizer": job.optimizer})
    lk = job.cfg["train"]["loss_kind"]
    job.add("train", 0.0, res.best_val, _test_metric(res.best, data, lk),
            extra={"best_epoch": res.best_epoch}, checkpoint=job.rel(ck))


def _pipe_iterative(job: _Job, mode: str, stage: str) -> None:
    data = job.data()
    init = job.init()
    cfg = job.cfg.train_config(job.optimizer)
    runner = imp_run if mode == "imp-rewind" else standard_prune_run
    run = runner(data, init, cfg, job.cfg.schedule(mode), derive_seed(job.seed, "prune"))
    init_path = save_checkpoint(init, job.dir / "init.fcpt")
    dense_path = save_checkpoint(run.dense.best, job.dir / "dense.fcpt")
    lk = cfg.loss_kind
    job.add("full", 0.0, run.dense.best_val, _test_metric(run.dense.best, data, lk),
            checkpoint=job.rel(dense_path), extra={"init": job.rel(init_path)})
    for k, row in enumerate(run.rows, start=1):
        mpath = save_mask(row.ticket.mask, job.dir / f"{stage}_k{k}.fmsk")
        cpath = save_checkpoint(row.checkpoint, job.dir / f"{stage}_k{k}.fcpt")
        job.add(stage, row.sparsity, row.best_val_metric, _test_metric(row.checkpoint, data, lk),
                checkpoint=job.rel(cpath), mask=job.rel(mpath), extra={"iteration": k})


def pipe_imp(job: _Job) -> None:
    _pipe_iterative(job, "imp-rewind", "imp")


def pipe_std(job: _Job) -> None:
    _pipe_iterative(job, "standard", "std")


def pipe_oneshot(job: _Job) -> None:
    data = job.data()
    res = job.train(data)
    lk = job.cfg["train"]["loss_kind"]
    ck = save_checkpoint(res.best, job.dir / "dense.fcpt")
    job.add("full", 0.0, res.best_val, _test_metric(res.best, data, lk), checkpoint=job.rel(ck))
    for s, metric in oneshot_prune_eval(res.best, job.cfg["prune"]["oneshot_grid"], data, lk):
        job.add("oneshot", s, metric, float("nan"))


def pipe_structured(job: _Job) -> None:
    data = job.data()
    teacher = job.train(data)
    scfg = job.cfg.structured_config()
    res = structured_prune_train(DistillPair(teacher.best, teacher.best.copy()), data, scfg,
                                 job.cfg["structured"]["epochs"], derive_seed(job.seed, "structured"))
    ck, side = res.save(job.dir / "student")
    job.add("teacher", 0.0, teacher.best_val, _test_metric(teacher.best, data, "cross-entropy"))
    job.add("structured", res.sparsity, res.val_metric, _test_metric(res.student, data, "cross-entropy"),
            checkpoint=job.rel(ck), mask=job.rel(side),
            extra={"within_target": res.within_target, "target": scfg.s_target,
                   "expected_sparsity": res.expected_trace[-1] if res.expected_trace else float("nan")})


def pipe_quantize(job: _Job) -> None:
    data = job.data()
    res = job.train(data)
    lk = job.cfg["train"]["loss_kind"]
    qm = quantize_weights(res.best)
    qpath = save_quantized(qm, job.dir / "model.fqnt")
    split = job.cfg["quantize"]["split"]
    rep = quant_report(res.best, qm, job.split(data, split), lk)
    rep_test = quant_report(res.best, qm, data.test.batch(), lk)
    job.add("quantize", 0.0, rep.quant_metric, rep_test.quant_metric, checkpoint=job.rel(qpath),
            extra={"split": split, "float_metric": rep.float_metric, "drop": rep.drop,
                   "max_logit_divergence": rep.max_logit_divergence, "float_test": rep_test.float_metric})


def pipe_sharpness(job: _Job) -> None:
    data = job.data()
    res = job.train(data)
    sc = job.cfg["sharpness"]
    lk = job.cfg["train"]["loss_kind"]
    batch = job.split(data, sc["split"])
    phis = {}
    for eps in sc["epsilons"]:
        cfg = SharpnessConfig(eps, sc["max_dim"], sc["projection_seed"], sc["steps"], sc["restarts"])
        phis[eps] = model_sharpness(res.best, batch, cfg, lk).phi
    ck = save_checkpoint(res.best, job.dir / "model.fcpt")
    job.add("sharpness", 0.0, res.best_val, _test_metric(res.best, data, lk), phi=_kv(phis),
            checkpoint=job.rel(ck), extra={"split": sc["split"]})


def pipe_contour(job: _Job) -> None:
    cc = job.cfg["contour"]
    data = job.data()
    init = job.init()
    wa = job.train(data, cc["optimizer_a"], init).best
    wb = job.train(data, cc["optimizer_b"], init).best
    spec = ContourSpec(init, wa, wb, cc["resolution"], tuple(cc["alpha_range"]), tuple(cc["beta_range"]),
                       cc["head_source"])
    grid = contour_grid(spec, eval_loss_fn(job.split(data, cc["split"]), job.cfg["train"]["loss_kind"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["beta\\alpha"] + [_fmt(float(a)) for a in grid.alphas])
    for b, row in zip(grid.betas, grid.loss):
        w.writerow([_fmt(float(b))] + [_fmt(float(v)) for v in row])
    csv_path = job.dir / f"contour_head_{cc['head_source']}.csv"
    atomic_write_text(csv_path, buf.getvalue())
    marks = []
    for name, (a, b) in grid.anchors.items():
        c = (a - grid.alphas[0]) / (grid.alphas[1] - grid.alphas[0])
        r = (b - grid.betas[0]) / (grid.betas[1] - grid.betas[0])
        label = {"init": "init", "a": cc["optimizer_a"], "b": cc["optimizer_b"]}[name]
        marks.append((r, c, label))
    doc = svg.heatmap(np.log1p(grid.loss), [f"{b:.2f}" for b in grid.betas], [f"{a:.2f}" for a in grid.alphas],
                      f"log(1+loss), head from {cc['optimizer_' + cc['head_source']]}", annotate=False,
                      marks=marks)
    svg_path = job.dir / f"contour_head_{cc['head_source']}.svg"
    atomic_write_text(svg_path, doc)
    area_a, area_b = basin_area(grid, "a"), basin_area(grid, "b")
    job.add("contour", 0.0, float("nan"), float("nan"), optimizer=f"{cc['optimizer_a']}|{cc['optimizer_b']}",
            checkpoint=job.rel(csv_path),
            extra={"basin_a": area_a, "basin_b": area_b, "anchor_b_alpha": grid.anchors["b"][0],
                   "anchor_b_beta": grid.anchors["b"][1], "head_source": cc["head_source"]})


def ticket_for(job: _Job, data: TaskData, optimizer: str, sparsity: float) -> Ticket:
    """IMP ticket at ``sparsity`` learned on ``data`` with ``optimizer``."""
    inc = job.cfg["prune"]["increment"]
    k = int(round(sparsity / inc))
    sched = job.cfg.schedule("imp-rewind")
    sched = type(sched)(sched.mode, sched.increment, k)
    run = imp_run(data, job.init(), job.cfg.train_config(optimizer), sched, derive_seed(job.seed, "prune"))
    return run.rows[-1].ticket


def pipe_transfer(job: _Job) -> None:
    """Ticket comparison: {random, learned tickets} x fine-tuning optimizers x target tasks."""
    tc = job.cfg["transfer"]
    source = job.cfg["task"]["generator"]
    targets = tc["targets"] or (source, TRANSFER_PAIRS[source])
    src_data = job.data()
    tickets: dict[str, Ticket] = {}
    for opt in tc["ticket_optimizers"]:
        tickets[opt] = ticket_for(job, src_data, opt, tc["ticket_sparsity"])
        tickets[opt].save(job.dir, f"ticket_{opt}")
    if tc["include_random"]:
        init = job.init()
        tickets["random"] = Ticket(random_mask(init, tc["ticket_sparsity"], derive_seed(job.seed, "random-mask")),
                                   init, {"task": source, "optimizer": "random"})
        tickets["random"].save(job.dir, "ticket_random")
    for target in targets:
        data = job.data(target)
        for tname, ticket in tickets.items():
            for ft in tc["finetune_optimizers"]:
                val, best = transfer_ticket(ticket, data, job.cfg.train_config(ft), job.seed)
                job.add("transfer", ticket.sparsity, val, _test_metric(best, data, "cross-entropy"),
                        task=target, optimizer=ft, mask=f"{job.optimizer}/seed{job.seed}/ticket_{tname}.fmsk",
                        extra={"source": source, "target": target, "ticket": tname, "finetune": ft})


PIPELINE_FNS = {
    "train": pipe_train, "imp": pipe_imp, "std": pipe_std, "oneshot": pipe_oneshot,
    "structured": pipe_structured, "quantize": pipe_quantize, "sharpness": pipe_sharpness,
    "contour": pipe_contour, "transfer": pipe_transfer,
}


def _jobs(cfg: ExperimentConfig) -> list[tuple[str, int]]:
    # contour and transfer pick their optimizers from their own sections
    opts = ("grid",) if cfg.pipeline in ("contour", "transfer") else cfg.optimizers
    return [(o, s) for o in opts for s in cfg.seeds]


def run_job(cfg: ExperimentConfig, optimizer: str, seed: int, out: Path) -> tuple[list[RunRecord], float, str]:
    job = _Job(cfg, optimizer, seed, out)
    t0 = time.perf_counter()
    try:
        job.dir.mkdir(parents=True, exist_ok=True)
        PIPELINE_FNS[cfg.pipeline](job)
        err = ""
    except Exception as exc:  # per-seed isolation: report and let the other seeds finish
        err = f"{type(exc).__name__}: {exc}"
        job.records.append(RunRecord(job.hash, cfg.pipeline, cfg["task"]["generator"], optimizer, seed,
                                     "error", len(job.records), float("nan"), float("nan"), float("nan"),
                                     extra=_kv({"error": err.replace(";", ",").replace("\n", " ")}),
                                     status="failed"))
        traceback.print_exc()
    return job.records, time.perf_counter() - t0, err


def _run_job_tuple(args):
    return run_job(*args)


@dataclass
class RunSummary:
    out: Path
    records: list[RunRecord]
    failures: list[tuple[str, int, str]]

    @property
    def ok(self) -> bool:
        return not self.failures


def workers() -> int:
    raw = os.environ.get("FLATCOMP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> RunSummary:
    out = Path(out) if out is not None else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.resolved.ini", f"# config hash {cfg.hash()}\n" + cfg.to_ini())
    jobs = _jobs(cfg)
    n = min(workers(), len(jobs))
    args = [(cfg, o, s, out) for o, s in jobs]
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_job_tuple, args))
    else:
        results = [run_job(*a) for a in args]
    records, timings, failures = [], [], []
    for (o, s), (recs, secs, err) in zip(jobs, results):
        records.extend(recs)
        timings.append((o, s, secs))
        if err:
            failures.append((o, s, err))
    atomic_write_text(out / "records.csv", records_csv(records))
    tb = io.StringIO()
    tw = csv.writer(tb, lineterminator="\n")
    tw.writerow(["optimizer", "seed", "seconds"])
    for o, s, secs in timings:
        tw.writerow([o, s, f"{secs:.3f}"])
    atomic_write_text(out / "timings.csv", tb.getvalue())
    return RunSummary(out, records, failures)


def run_path(config_path: str | Path, out: str | Path | None = None) -> RunSummary:
    from .config import load_config
    return run(load_config(config_path), out)
