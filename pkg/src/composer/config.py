"""Experiment configuration files.

A config is an INI file (one ``key = value`` per line, dotted section names
for nesting)::

    [experiment]
    name = wide_mnist
    seed = 0

    [data]
    kind = wide_mnist
    mnist_dir = /data/mnist
    synth_seed = 1234

    [model]
    controller_hidden = 32
    controller_pool = 4

    [module.1.1]
    hidden = 32
    glimpse = left

    [train]
    steps = 15000

    [preference.glimpse]
    distribution = log_uniform
    low = 0.01
    high = 10

Every key has a default listed in :data:`DEFAULTS`; :func:`dump_config`
writes all of them, so a dumped file fully determines a run.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from composer.errors import ComposerError, ConfigError
from composer.model import ComposerConfig, ModuleSpec
from composer.preferences import KINDS, PreferenceSpec
from composer.trainer import TrainConfig

DEFAULTS = {
    "experiment": {"name": "composer", "seed": "", "out_dir": ""},
    "data": {
        "kind": "wide_mnist", "mnist_dir": "", "data_dir": "", "synth_seed": "1234",
        "train_limit": "0", "test_limit": "0",
    },
    "model": {
        "stem": "", "controller_hidden": "32", "controller_pool": "4",
        "gamma_scale": "1.0", "head_init": "zeros",
    },
    "module": {"hidden": "", "glimpse": "activations", "output": ""},
    "train": {
        "batch_size": "64", "lr": "0.1", "steps": "1000", "baseline": "moving_average",
        "baseline_decay": "0.99", "eval_every": "0", "checkpoint_every": "0",
    },
    "preference": {
        "distribution": "constant", "value": "0.0", "low": "0.0", "high": "1.0", "zero_mass": "0.0",
    },
    "sweep": {
        "gamma_g": "0", "gamma_e": "0", "modes": "argmax,sample", "rho": "0,0.5,1",
        "heatmap_gamma_g": "", "eval_seed": "0",
    },
    "ablation": {"seeds": "0", "gamma_e": "1.0", "entropy_sweep": ""},
}

_MODULE_SECTION = re.compile(r"^module\.(\d+)\.(\d+)$")


@dataclass
class DataSpec:
    kind: str = "wide_mnist"
    mnist_dir: str = ""
    data_dir: str = ""
    synth_seed: int = 1234
    train_limit: int = 0
    test_limit: int = 0


@dataclass
class SweepSpec:
    gamma_g: list[float] = field(default_factory=lambda: [0.0])
    gamma_e: float = 0.0
    modes: list[str] = field(default_factory=lambda: ["argmax", "sample"])
    rho: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    heatmap_gamma_g: list[float] = field(default_factory=list)
    eval_seed: int = 0


@dataclass
class AblationSpec:
    seeds: list[int] = field(default_factory=lambda: [0])
    gamma_e: float = 1.0
    entropy_sweep: list[float] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    data: DataSpec
    model: ComposerConfig
    train: TrainConfig
    sweep: SweepSpec
    ablation: AblationSpec
    out_dir: str = ""

    @property
    def preferences(self) -> list[PreferenceSpec]:
        return self.train.preferences

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return parse_config(dump_config(self), seed=seed)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _num(v: float) -> str:
    return repr(float(v))


def _section(cp, name: str, kind: str) -> dict:
    values = dict(DEFAULTS[kind])
    if cp.has_section(name):
        unknown = set(cp[name]) - set(values)
        if unknown:
            raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
        values.update(cp[name])
    return values


def parse_config(text: str, seed: int | None = None) -> ExperimentConfig:
    """Parse config text; ``seed`` overrides ``experiment.seed``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
        return _build(cp, seed)
    except ComposerError:
        raise
    except (configparser.Error, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def _build(cp, seed_override) -> ExperimentConfig:
    known = {"experiment", "data", "model", "train", "sweep", "ablation"}
    for name in cp.sections():
        if name not in known and not _MODULE_SECTION.match(name) and not name.startswith("preference."):
            raise ConfigError(f"unknown section [{name}]")

    exp = _section(cp, "experiment", "experiment")
    if cp.has_option("experiment", "seed"):
        seed = int(cp["experiment"]["seed"])
    elif seed_override is None:
        raise ConfigError("experiment.seed is required (no ambient randomness)")
    if seed_override is not None:
        seed = int(seed_override)

    d = _section(cp, "data", "data")
    if d["kind"] not in ("wide_mnist", "mnist"):
        raise ConfigError(f"unknown data.kind {d['kind']!r}")
    data = DataSpec(
        d["kind"], d["mnist_dir"], d["data_dir"], int(d["synth_seed"]),
        int(d["train_limit"]), int(d["test_limit"]),
    )

    prefs = []
    for kind in KINDS:
        name = f"preference.{kind}"
        if cp.has_section(name):
            p = _section(cp, name, "preference")
            prefs.append(PreferenceSpec(
                kind, p["distribution"], float(p["value"]), float(p["low"]),
                float(p["high"]), float(p["zero_mass"]),
            ))
    for name in cp.sections():
        if name.startswith("preference.") and name.split(".", 1)[1] not in KINDS:
            raise ConfigError(f"unknown preference kind in [{name}]")

    num_classes = 20 if data.kind == "wide_mnist" else 10
    input_shape = (28, 56) if data.kind == "wide_mnist" else (28, 28)
    layers: dict[int, dict[int, ModuleSpec]] = {}
    for name in cp.sections():
        match = _MODULE_SECTION.match(name)
        if not match:
            continue
        i, j = int(match.group(1)), int(match.group(2))
        s = _section(cp, name, "module")
        layers.setdefault(i, {})[j] = ModuleSpec(
            hidden=_ints(s["hidden"]),
            output=int(s["output"]) if s["output"] else -1,
            glimpse=s["glimpse"],
        )
    if not layers:
        raise ConfigError("config defines no [module.I.J] sections")
    if sorted(layers) != list(range(1, len(layers) + 1)):
        raise ConfigError("metalayers must be numbered 1..n without gaps")
    metalayers = []
    for i in sorted(layers):
        mods = layers[i]
        if sorted(mods) != list(range(1, len(mods) + 1)):
            raise ConfigError(f"modules of metalayer {i} must be numbered 1..m without gaps")
        for spec in mods.values():
            if spec.output == -1:
                if i != len(layers):
                    raise ConfigError(f"module in metalayer {i} needs an explicit output size")
                spec.output = num_classes
        metalayers.append([mods[j] for j in sorted(mods)])

    m = _section(cp, "model", "model")
    model = ComposerConfig(
        input_shape=input_shape,
        num_classes=num_classes,
        metalayers=metalayers,
        stem=_ints(m["stem"]),
        controller_hidden=int(m["controller_hidden"]),
        controller_pool=int(m["controller_pool"]),
        gamma_inputs=[p.kind for p in prefs],
        gamma_scale=float(m["gamma_scale"]),
        head_init=m["head_init"],
    )

    t = _section(cp, "train", "train")
    train = TrainConfig(
        batch_size=int(t["batch_size"]), lr=float(t["lr"]), steps=int(t["steps"]), seed=seed,
        baseline=t["baseline"], baseline_decay=float(t["baseline_decay"]), preferences=prefs,
        eval_every=int(t["eval_every"]), checkpoint_every=int(t["checkpoint_every"]),
    )

    s = _section(cp, "sweep", "sweep")
    modes = [v.strip() for v in s["modes"].split(",") if v.strip()]
    if any(mode not in ("argmax", "sample") for mode in modes):
        raise ConfigError(f"sweep.modes must be argmax and/or sample, got {modes}")
    sweep = SweepSpec(
        _floats(s["gamma_g"]), float(s["gamma_e"]), modes, _floats(s["rho"]),
        _floats(s["heatmap_gamma_g"]), int(s["eval_seed"]),
    )
    a = _section(cp, "ablation", "ablation")
    ablation = AblationSpec(_ints(a["seeds"]), float(a["gamma_e"]), _floats(a["entropy_sweep"]))
    return ExperimentConfig(exp["name"], seed, data, model, train, sweep, ablation, exp["out_dir"])


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key written, fixed section order."""
    out = []

    def section(name, items):
        out.append(f"[{name}]")
        out.extend(f"{k} = {v}" for k, v in items)
        out.append("")

    section("experiment", [("name", cfg.name), ("seed", cfg.seed), ("out_dir", cfg.out_dir)])
    d = cfg.data
    section("data", [
        ("kind", d.kind), ("mnist_dir", d.mnist_dir), ("data_dir", d.data_dir),
        ("synth_seed", d.synth_seed), ("train_limit", d.train_limit), ("test_limit", d.test_limit),
    ])
    m = cfg.model
    section("model", [
        ("stem", ",".join(map(str, m.stem))), ("controller_hidden", m.controller_hidden),
        ("controller_pool", m.controller_pool), ("gamma_scale", _num(m.gamma_scale)),
        ("head_init", m.head_init),
    ])
    for i, layer in enumerate(m.metalayers, start=1):
        for j, spec in enumerate(layer, start=1):
            section(f"module.{i}.{j}", [
                ("hidden", ",".join(map(str, spec.hidden))), ("output", spec.output),
                ("glimpse", spec.glimpse),
            ])
    t = cfg.train
    section("train", [
        ("batch_size", t.batch_size), ("lr", _num(t.lr)), ("steps", t.steps),
        ("baseline", t.baseline), ("baseline_decay", _num(t.baseline_decay)),
        ("eval_every", t.eval_every), ("checkpoint_every", t.checkpoint_every),
    ])
    for p in t.preferences:
        section(f"preference.{p.kind}", [
            ("distribution", p.distribution), ("value", _num(p.value)), ("low", _num(p.low)),
            ("high", _num(p.high)), ("zero_mass", _num(p.zero_mass)),
        ])
    s = cfg.sweep
    section("sweep", [
        ("gamma_g", ",".join(map(_num, s.gamma_g))), ("gamma_e", _num(s.gamma_e)),
        ("modes", ",".join(s.modes)), ("rho", ",".join(map(_num, s.rho))),
        ("heatmap_gamma_g", ",".join(map(_num, s.heatmap_gamma_g))), ("eval_seed", s.eval_seed),
    ])
    a = cfg.ablation
    section("ablation", [
        ("seeds", ",".join(map(str, a.seeds))), ("gamma_e", _num(a.gamma_e)),
        ("entropy_sweep", ",".join(map(_num, a.entropy_sweep))),
    ])
    return "\n".join(out)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, seed=seed)


def derived_seed(seed: int, *stream: int) -> int:
    """Independent integer seed for a named sub-stream of the global seed."""
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])
