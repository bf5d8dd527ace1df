import csv
import shutil
import subprocess
import xml.etree.ElementTree as ET
from collections import defaultdict

import numpy as np
import pytest

from flatcomp.harness.cli import main
from flatcomp.harness.config import ConfigError, defaults, load_config, parse_config
from flatcomp.harness.report import (ReportError, compare_tickets, report, summarize,
                                     ticket_matrix, transfer_difference)
from flatcomp.harness.runner import read_records, run
from flatcomp.models import ModelSpec, build_model

SMALL = """
[experiment]
pipeline = {pipeline}
seeds = {seeds}

[task]
generator = moons
n_train = 80
n_val = 40
n_test = 40

[model]
layer_sizes = 2,6,6,2

[train]
optimizers = {optimizers}
epochs = 2
"""


def small_config(tmp_path, pipeline="imp", seeds="0,1", optimizers="adam,sam", extra=""):
    path = tmp_path / f"{pipeline}.ini"
    path.write_text(SMALL.format(pipeline=pipeline, seeds=seeds, optimizers=optimizers) + extra)
    return path


def test_every_field_has_a_default():
    cfg = defaults()
    cfg.validate()
    assert cfg["train"]["lr"] == 2e-3 and cfg["train"]["rho"] == 0.05 and cfg["train"]["weight_decay"] == 0.0


def test_unknown_key_is_rejected_by_name():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="optimiser"):
        parse_config("[optimiser]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="epochs"):
        parse_config("[train]\nepochs = many\n")
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config("[train]\noptimizers = lbfgs\n")


def test_config_hash_ignores_key_order_formatting_and_out():
    a = parse_config("[train]\nlr = 0.01\nepochs = 3\n[experiment]\nout = x\n")
    b = parse_config("[experiment]\nout = elsewhere\n\n[train]\nepochs=3\nlr = 1e-2\n")
    assert a.hash() == b.hash()
    assert a.hash() != parse_config("[train]\nlr = 0.02\nepochs = 3\n").hash()


def test_to_ini_round_trips():
    cfg = parse_config("[train]\noptimizers = sam,swa\nlr = 0.004\n[prune]\noneshot_grid = 0.5,0.9\n")
    back = parse_config(cfg.to_ini())
    assert back.values == cfg.values and back.hash() == cfg.hash()


def test_imp_run_emits_nine_rows_per_seed_and_echoes_config(tmp_path):
    summary = run(load_config(small_config(tmp_path)), tmp_path / "out")
    assert summary.ok
    rows = read_records(tmp_path / "out" / "records.csv")
    per = defaultdict(list)
    for r in rows:
        if r["stage"] == "imp":
            per[(r["optimizer"], r["seed"])].append(float(r["sparsity"]))
    assert set(per) == {(o, s) for o in ("adam", "sam") for s in ("0", "1")}
    prunable = build_model(ModelSpec(layer_sizes=(2, 6, 6, 2))).prunable_count
    for levels in per.values():
        assert len(levels) == 9
        assert all(abs(x - 0.1 * k) * prunable <= 1 for k, x in enumerate(levels, start=1))
    echoed = load_config(tmp_path / "out" / "config.resolved.ini")
    assert echoed.hash() == load_config(small_config(tmp_path)).hash()
    for r in rows:
        if r["mask"]:
            assert (tmp_path / "out" / r["mask"]).exists()
    assert not list((tmp_path / "out").rglob("*.tmp*"))


def test_same_config_twice_gives_identical_records(tmp_path):
    path = small_config(tmp_path, pipeline="oneshot")
    run(load_config(path), tmp_path / "a")
    run(load_config(path), tmp_path / "b")
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()


def test_failed_seed_is_isolated(tmp_path, monkeypatch):
    import flatcomp.harness.runner as R
    real = R.PIPELINE_FNS["train"]

    def flaky(job):
        if job.seed == 1:
            raise RuntimeError("boom")
        real(job)

    monkeypatch.setitem(R.PIPELINE_FNS, "train", flaky)
    summary = run(load_config(small_config(tmp_path, "train", "0,1", "adam")), tmp_path / "out")
    assert not summary.ok and summary.failures[0][:2] == ("adam", 1)
    rows = read_records(tmp_path / "out" / "records.csv")
    assert {r["status"] for r in rows if r["seed"] == "0"} == {"ok"}
    assert [r["status"] for r in rows if r["seed"] == "1"] == ["failed"]


def test_report_means_match_offline_recomputation(tmp_path):
    run(load_config(small_config(tmp_path, "oneshot", "0,1,2,3,4")), tmp_path / "out")
    written = report([str(tmp_path / "out" / "records.csv")], tmp_path / "rep")
    raw = read_records(tmp_path / "out" / "records.csv")
    groups = defaultdict(list)
    for r in raw:
        groups[(r["optimizer"], round(float(r["sparsity"]), 9))].append(float(r["val_metric"]))
    with open(tmp_path / "rep" / "report.csv") as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == len(groups)
    for row in got:
        vals = groups[(row["optimizer"], round(float(row["sparsity"]), 9))]
        assert float(row["mean"]) == pytest.approx(np.mean(vals), rel=1e-12)
        assert float(row["stddev"]) == pytest.approx(np.std(vals, ddof=1), rel=1e-9, abs=1e-15)
        assert int(row["n"]) == 5
    svg = next(p for p in written if p.suffix == ".svg")
    root = ET.fromstring(svg.read_text())
    lines = [e for e in root.iter() if e.tag.endswith("polyline") and "series" in e.get("class", "")]
    assert len(lines) == 2


def test_single_run_report_has_one_row_per_level(tmp_path):
    run(load_config(small_config(tmp_path, "imp", "0", "adam")), tmp_path / "out")
    report([str(tmp_path / "out" / "records.csv")], tmp_path / "rep")
    rows = list(csv.DictReader(open(tmp_path / "rep" / "report.csv")))
    assert len(rows) == 10  # the dense model plus nine sparsity levels


def test_report_rejects_mixed_tasks(tmp_path):
    run(load_config(small_config(tmp_path, "train", "0", "adam")), tmp_path / "a")
    rings = small_config(tmp_path, "train", "0", "adam").read_text().replace("moons", "rings")
    (tmp_path / "r.ini").write_text(rings)
    run(load_config(tmp_path / "r.ini"), tmp_path / "b")
    with pytest.raises(ReportError, match="incompatible"):
        summarize(read_records(tmp_path / "a" / "records.csv") + read_records(tmp_path / "b" / "records.csv"))
    with pytest.raises(ReportError):
        report([str(tmp_path / "nothing*.csv")], tmp_path)


def test_transfer_matrices_and_compare_tickets(tmp_path):
    extra = "\n[transfer]\nticket_sparsity = 0.3\n[prune]\niterations = 3\n"
    run(load_config(small_config(tmp_path, "transfer", "0,1", extra=extra)), tmp_path / "out")
    rows = read_records(tmp_path / "out" / "records.csv")
    m = ticket_matrix(rows, "moons")
    assert m.rows == ["random", "adam", "sam"] and m.cols == ["adam", "sam"]
    assert not np.isnan(m.values).any()
    d = transfer_difference(rows, "adam")
    assert d.rows == ["moons"] and d.cols == ["moons", "rings"] and d.values.shape == (1, 2)
    # the diagonal is same-task transfer
    same = [r for r in rows if "source=moons" in r["extra"] and "target=moons" in r["extra"]
            and "finetune=adam" in r["extra"]]
    by_seed = defaultdict(dict)
    for r in same:
        by_seed[r["seed"]][dict(kv.split("=") for kv in r["extra"].split(";"))["ticket"]] = float(r["val_metric"])
    assert d.values[0, 0] == pytest.approx(np.mean([s["sam"] - s["adam"] for s in by_seed.values()]))
    written = compare_tickets([tmp_path / "out" / "records.csv"], tmp_path / "cmp")
    assert any(p.name == "transfer_diff_adam.csv" for p in written)
    shutil.rmtree(tmp_path / "out" / "grid" / "seed1")
    with pytest.raises(FileNotFoundError, match="seed1"):
        compare_tickets([tmp_path / "out" / "records.csv"], tmp_path / "cmp")
    with pytest.raises(FileNotFoundError):
        compare_tickets([tmp_path / "missing.csv"], tmp_path / "cmp")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the diverging run overflows on purpose
def test_cli_exit_codes(tmp_path, capsys):
    good = small_config(tmp_path, "train", "0", "adam")
    assert main(["train", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "records.csv").exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmomentum = 0.9\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "momentum" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2
    assert main(["train"]) == 2
    broken = small_config(tmp_path, "train", "0", "adam", extra="\n[regularizer]\nkind = l1\ncoefficient = 1e308\n")
    assert main(["train", "--config", str(broken), "--out", str(tmp_path / "x")]) == 3
    assert main(["report", str(tmp_path / "o" / "records.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert main(["report", str(tmp_path / "none*.csv")]) == 2


def test_cli_seed_override(tmp_path):
    path = small_config(tmp_path, "train", "0,1,2", "adam")
    assert main(["train", "--config", str(path), "--seed", "2", "--out", str(tmp_path / "o")]) == 0
    assert {r["seed"] for r in read_records(tmp_path / "o" / "records.csv")} == {"2"}


def test_console_script(tmp_path):
    exe = shutil.which("flatcomp")
    if exe is None:
        pytest.skip("console script not installed")
    path = small_config(tmp_path, "quantize", "0", "adam")
    proc = subprocess.run([exe, "quantize", "--config", str(path), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert list((tmp_path / "o").rglob("*.fqnt"))
