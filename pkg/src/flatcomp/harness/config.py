"""INI experiment configuration: sections of ``key = value`` lines, every key defaulted."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..datasets import TaskSpec
from ..models import ModelSpec
from ..optim import RegularizerSpec
from ..pruning import PruneSchedule
from ..structured import HardConcrete, StructuredPruneConfig
from ..training import OPTIMIZERS, TrainConfig

PIPELINES = ("train", "imp", "std", "oneshot", "structured", "quantize", "sharpness", "contour", "transfer")


class ConfigError(ValueError):
    pass


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _words(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "experiment": {
        "pipeline": (str, "train"),
        "seeds": (_ints, (0,)),
        "out": (str, "runs/default"),
        "name": (str, ""),
    },
    "task": {
        "generator": (str, "moons"),
        "n_train": (int, 1000),
        "n_val": (int, 500),
        "n_test": (int, 500),
        "noise": (float, 0.1),
        "seed": (int, 0),
        "seq_len": (int, 16),
    },
    "model": {
        "kind": (str, "mlp"),
        "layer_sizes": (_ints, (2, 16, 16, 2)),
        "activation": (str, "relu"),
        "n_classes": (int, 2),
        "n_layers": (int, 2),
        "n_heads": (int, 2),
        "d_model": (int, 32),
        "d_ff": (int, 64),
        "vocab": (int, 3),
        "pooling": (str, "first"),
    },
    "train": {
        "optimizers": (_words, ("adam",)),
        "lr": (float, 2e-3),
        "rho": (float, 0.05),
        "weight_decay": (float, 0.0),
        "swa_lr": (float, 8e-3),
        "swa_window": (float, 0.5),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "eval_every": (int, 1),
        "lr_schedule": (str, "linear"),
        "loss_kind": (str, "cross-entropy"),
    },
    "regularizer": {
        "kind": (str, "none"),
        "coefficient": (float, 0.0),
    },
    "prune": {
        "increment": (float, 0.1),
        "iterations": (int, 9),
        "oneshot_grid": (_floats, (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)),
    },
    "structured": {
        "s_target": (float, 0.95),
        "epochs": (int, 15),
        "lr": (float, 1e-3),
        "gate_lr": (float, 0.05),
        "lambda_lr": (float, 2.0),
        "penalty": (float, 500.0),
        "distill_weight": (float, 1.0),
        "temperature": (float, 2.0),
        "warmup_frac": (float, 0.5),
        "finetune_epochs": (int, 5),
        "settle_epochs": (int, 10),
        "beta": (float, 2.0 / 3.0),
        "gamma": (float, -0.1),
        "zeta": (float, 1.1),
    },
    "quantize": {
        "split": (str, "val"),
    },
    "sharpness": {
        "epsilons": (_floats, (5e-3, 1e-3, 5e-4)),
        "max_dim": (int, 100),
        "projection_seed": (int, 0),
        "steps": (int, 30),
        "restarts": (int, 3),
        "split": (str, "val"),
    },
    "contour": {
        "resolution": (int, 21),
        "alpha_range": (_floats, (-0.5, 1.5)),
        "beta_range": (_floats, (-0.5, 1.5)),
        "head_source": (str, "a"),
        "optimizer_a": (str, "adam"),
        "optimizer_b": (str, "sam"),
        "split": (str, "val"),
    },
    "transfer": {
        "targets": (_words, ()),
        "ticket_sparsity": (float, 0.6),
        "ticket_optimizers": (_words, ("adam", "sam")),
        "finetune_optimizers": (_words, ("adam", "sam")),
        "include_random": (_bool, True),
    },
}


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def pipeline(self) -> str:
        return self.values["experiment"]["pipeline"]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["experiment"]["seeds"]

    @property
    def optimizers(self) -> tuple[str, ...]:
        return self.values["train"]["optimizers"]

    @property
    def out(self) -> Path:
        return Path(self.values["experiment"]["out"])

    def with_(self, section: str, **kw) -> "ExperimentConfig":
        vals = {s: dict(d) for s, d in self.values.items()}
        vals[section].update(kw)
        cfg = ExperimentConfig(vals)
        cfg.validate()
        return cfg

    # typed views
    def task_spec(self, generator: str | None = None) -> TaskSpec:
        t = dict(self["task"])
        if generator is not None:
            t["generator"] = generator
        return TaskSpec(**t)

    def model_spec(self, init_seed: int = 0) -> ModelSpec:
        m = dict(self["model"])
        m["layer_sizes"] = tuple(m["layer_sizes"])
        return ModelSpec(**m, max_len=self["task"]["seq_len"], init_seed=init_seed)

    def train_config(self, optimizer: str) -> TrainConfig:
        t = {k: v for k, v in self["train"].items() if k != "optimizers"}
        return TrainConfig(optimizer=optimizer, regularizer=RegularizerSpec(**self["regularizer"]), **t)

    def schedule(self, mode: str) -> PruneSchedule:
        return PruneSchedule(mode, self["prune"]["increment"], self["prune"]["iterations"])

    def structured_config(self) -> StructuredPruneConfig:
        s = dict(self["structured"])
        hc = HardConcrete(s.pop("beta"), s.pop("gamma"), s.pop("zeta"))
        s.pop("epochs")
        return StructuredPruneConfig(hc=hc, batch_size=self["train"]["batch_size"], **s)

    def validate(self) -> None:
        problems = []
        if self.pipeline not in PIPELINES:
            problems.append(f"experiment.pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if not self.seeds:
            problems.append("experiment.seeds is empty")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append("experiment.seeds has duplicates")
        for opt in self.optimizers + (self["contour"]["optimizer_a"], self["contour"]["optimizer_b"]):
            if opt not in OPTIMIZERS:
                problems.append(f"unknown optimizer {opt!r}")
        for opt in self["transfer"]["finetune_optimizers"] + self["transfer"]["ticket_optimizers"]:
            if opt not in OPTIMIZERS:
                problems.append(f"unknown transfer optimizer {opt!r}")
        checks = [
            lambda: self.task_spec().validate(),
            lambda: self.model_spec().validate(),
            lambda: self.train_config(self.optimizers[0] if self.optimizers else "adam"),
            lambda: self.schedule("imp-rewind"),
            lambda: self.structured_config(),
        ]
        for check in checks:
            try:
                check()
            except (ValueError, TypeError) as exc:
                problems.append(str(exc))
        if self["sharpness"]["split"] not in ("train", "val", "test") or \
                self["contour"]["split"] not in ("train", "val", "test") or \
                self["quantize"]["split"] not in ("train", "val", "test"):
            problems.append("evaluation split must be train, val or test")
        if any(e <= 0 for e in self["sharpness"]["epsilons"]) or not self["sharpness"]["epsilons"]:
            problems.append("sharpness.epsilons must be non-empty and > 0")
        if len(self["contour"]["alpha_range"]) != 2 or len(self["contour"]["beta_range"]) != 2:
            problems.append("contour ranges need exactly two values")
        if self["contour"]["resolution"] < 2:
            problems.append("contour.resolution must be >= 2")
        if self["contour"]["head_source"] not in ("a", "b"):
            problems.append("contour.head_source must be a or b")
        inc = self["prune"]["increment"]
        if inc > 0:
            k = round(self["transfer"]["ticket_sparsity"] / inc)
            if abs(k * inc - self["transfer"]["ticket_sparsity"]) > 1e-9 or not 0 <= k <= self["prune"]["iterations"]:
                problems.append("transfer.ticket_sparsity must be a multiple of prune.increment within the schedule")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    # serialisation
    def to_ini(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def canonical(self, include_out: bool = False) -> dict:
        d = {s: {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(vals.items())}
             for s, vals in sorted(self.values.items())}
        if not include_out:
            d["experiment"] = {k: v for k, v in d["experiment"].items() if k != "out"}
        return d

    def hash(self) -> str:
        """Stable across key order, formatting and output directory."""
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def defaults() -> ExperimentConfig:
    return ExperimentConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case so typos are reported verbatim
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    vals = defaults().values
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                vals[section][key] = parser(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r} ({exc})") from exc
    cfg = ExperimentConfig(vals)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
