"""Command-line entry point: ``python -m composer <command> --config FILE``.

Commands
    gen-data        synthesize Wide-MNIST IDX files plus provenance
    train           train one model, write ``model.cmpz`` and ``run_log.jsonl``
    sweep           preference sweep and random-mixing baseline -> ``sweep.csv``
    heatmap         per-class module probabilities -> ``heatmap_*.csv``
    ablate-entropy  batch vs per-example entropy cost, MI report -> ``ablation.json``
    eval            accuracy and parameter use of a checkpoint -> ``eval.json``

Exit codes: 0 success, 2 config/usage error, 3 data/checkpoint error,
4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from composer import __version__
from composer.analysis import (
    checkpoint_hash,
    entropy_sweep,
    evaluate,
    evaluate_examples,
    module_class_heatmap,
    mutual_information,
    preference_sweep,
    random_mixing_baseline,
    write_heatmap_csv,
    write_json,
    write_sweep_csv,
)
from composer.config import ExperimentConfig, dump_config, load_config, parse_config
from composer.datasets import (
    LabeledDataset,
    find_mnist,
    load_idx,
    load_mnist,
    make_wide_mnist,
    write_idx,
)
from composer.errors import ComposerError, ConfigError, DataError
from composer.model import Composer, load_model, save_model
from composer.preferences import PreferenceSpec
from composer.trainer import train_loop

WIDE_FILES = {
    "train": ("wide-train-images-idx3-ubyte", "wide-train-labels-idx1-ubyte"),
    "test": ("wide-test-images-idx3-ubyte", "wide-test-labels-idx1-ubyte"),
}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def out_dir(cfg: ExperimentConfig, out: str | None) -> Path:
    path = Path(out or cfg.out_dir or f"runs/{cfg.name}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def synth_seeds(cfg: ExperimentConfig) -> dict:
    return {"train": cfg.data.synth_seed, "test": cfg.data.synth_seed + 1}


def _limit(ds: LabeledDataset, limit: int) -> LabeledDataset:
    return ds.subset(limit) if limit and limit < len(ds) else ds


def load_split(cfg: ExperimentConfig, split: str) -> LabeledDataset:
    """Dataset for one split, honouring the configured size limit.

    Wide-MNIST is read from ``data.data_dir`` when it holds generated files,
    otherwise synthesized in memory from the MNIST source (same bytes).
    """
    d = cfg.data
    limit = d.train_limit if split == "train" else d.test_limit
    if d.kind == "mnist":
        if not d.mnist_dir:
            raise ConfigError("data.mnist_dir is required")
        return _limit(load_mnist(d.mnist_dir, split), limit)
    if d.data_dir:
        images, labels = (Path(d.data_dir) / f for f in WIDE_FILES[split])
        if images.exists() and labels.exists():
            ds = load_idx(images, labels, num_classes=20, name=f"wide-mnist-{split}")
            return _limit(ds, limit)
    if not d.mnist_dir:
        raise ConfigError("Wide-MNIST needs data.mnist_dir (source) or data.data_dir (generated files)")
    return _limit(make_wide_mnist(load_mnist(d.mnist_dir, split), synth_seeds(cfg)[split]), limit)


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.data.kind != "wide_mnist":
        raise ConfigError("gen-data only applies to data.kind = wide_mnist")
    if not cfg.data.mnist_dir:
        raise ConfigError("gen-data needs data.mnist_dir")
    dest = Path(cfg.data.data_dir) if cfg.data.data_dir else out / "data"
    dest.mkdir(parents=True, exist_ok=True)
    provenance = {"synthesis_seeds": synth_seeds(cfg), "source": {}, "outputs": {}}
    for split, seed in synth_seeds(cfg).items():
        src_images, src_labels = find_mnist(cfg.data.mnist_dir, split)
        source = load_mnist(cfg.data.mnist_dir, split)
        wide = make_wide_mnist(source, seed)
        images, labels = (dest / f for f in WIDE_FILES[split])
        write_idx(wide, images, labels)
        provenance["source"][split] = {
            src_images.name: _sha256(src_images), src_labels.name: _sha256(src_labels),
        }
        provenance["outputs"][split] = {
            images.name: _sha256(images), labels.name: _sha256(labels), "count": len(wide),
        }
    write_json(provenance, dest / "provenance.json")
    return provenance


def build_model(cfg: ExperimentConfig) -> Composer:
    return Composer(cfg.model, seed=cfg.seed)


def cmd_train(cfg: ExperimentConfig, out: Path) -> Composer:
    """Train one model; on divergence ``last_good.cmpz`` is left in ``out``."""
    train = load_split(cfg, "train")
    (out / "config.ini").write_text(dump_config(cfg))
    model = build_model(cfg)
    log_path = out / "run_log.jsonl"
    log_path.write_text("")
    ckpt_dir = out / "checkpoints" if cfg.train.checkpoint_every else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    train_loop(model, train, cfg.train, log_path=log_path, checkpoint_dir=ckpt_dir or out)
    save_model(model, out / "model.cmpz")
    write_json(
        {
            "version": __version__,
            "numpy": np.__version__,
            "seed": cfg.seed,
            "steps": cfg.train.steps,
            "data": train.provenance,
            "checkpoint_sha256": _sha256(out / "model.cmpz"),
            "betas": [b.tolist() for b in model.betas],
        },
        out / "provenance.json",
    )
    return model


def sweep_gammas(cfg: ExperimentConfig, model: Composer, glimpse_values=None) -> list[dict]:
    """Full preference dictionaries for the glimpse sweep values."""
    kinds = model.config.gamma_inputs
    values = cfg.sweep.gamma_g if glimpse_values is None else glimpse_values
    out = []
    for g in values:
        gamma = {}
        for kind in kinds:
            gamma[kind] = float(g) if kind == "glimpse" else cfg.sweep.gamma_e
        out.append(gamma)
    if "glimpse" not in kinds and len(values) > 1:
        raise ConfigError("sweep.gamma_g lists several values but the model has no glimpse input")
    return out


def _load_checkpoint(cfg: ExperimentConfig, checkpoint, out: Path) -> Composer:
    path = Path(checkpoint) if checkpoint else out / "model.cmpz"
    model = load_model(path)
    if model.config.canonical() != cfg.model.canonical():
        raise ConfigError(f"{path}: checkpoint topology does not match the [model]/[module.*] config")
    return model


def run_sweep(cfg: ExperimentConfig, model: Composer, test: LabeledDataset, workers: int = 1):
    gammas = sweep_gammas(cfg, model)
    seed = cfg.sweep.eval_seed
    points = preference_sweep(model, test, gammas, cfg.sweep.modes, seed=seed, workers=workers)
    baseline = []
    if cfg.sweep.rho:
        baseline = random_mixing_baseline(model, test, cfg.sweep.rho, seed=seed, gamma=gammas[0], workers=workers)
    return points, baseline


def cmd_sweep(cfg: ExperimentConfig, checkpoint, out: Path, workers: int = 1):
    model = _load_checkpoint(cfg, checkpoint, out)
    test = load_split(cfg, "test")
    points, baseline = run_sweep(cfg, model, test, workers)
    write_sweep_csv(points + baseline, out / "sweep.csv")
    return points, baseline


def cmd_heatmap(cfg: ExperimentConfig, checkpoint, out: Path) -> list[Path]:
    model = _load_checkpoint(cfg, checkpoint, out)
    test = load_split(cfg, "test")
    values = cfg.sweep.heatmap_gamma_g or cfg.sweep.gamma_g
    written = []
    for gamma in sweep_gammas(cfg, model, values):
        result = evaluate_examples(model, test, gamma, "argmax")
        for i in range(model.n_metalayers):
            hm = module_class_heatmap(model, test, gamma, metalayer=i, result=result)
            tag = f"g{gamma.get('glimpse', 0.0)!r}_ml{i}"
            path = out / f"heatmap_{tag}.csv"
            write_heatmap_csv(hm, path, model.betas[i], right_first=cfg.data.kind == "wide_mnist")
            written.append(path)
    return written


def ablation_config(cfg: ExperimentConfig, kind: str, seed: int) -> ExperimentConfig:
    """``cfg`` with a single constant entropy preference of the given kind."""
    spec = PreferenceSpec(kind, "constant", value=cfg.ablation.gamma_e)
    train = dataclasses.replace(cfg.train, preferences=[spec])
    model = dataclasses.replace(cfg.model, gamma_inputs=[kind])
    text = dump_config(dataclasses.replace(cfg, train=train, model=model))
    return parse_config(text, seed=seed)


def ablation_run(cfg: ExperimentConfig, kind: str, seed: int, train, test, out: Path | None = None) -> dict:
    run_cfg = ablation_config(cfg, kind, seed)
    model = build_model(run_cfg)
    log = None
    if out is not None:
        log = out / f"run_log_{kind}_s{seed}.jsonl"
        log.write_text("")
    train_loop(model, train, run_cfg.train, log_path=log)
    if out is not None:
        save_model(model, out / f"model_{kind}_s{seed}.cmpz")
    gamma = {kind: cfg.ablation.gamma_e}
    rng = np.random.default_rng(cfg.sweep.eval_seed)
    result = evaluate_examples(model, test, gamma, "sample", rng)
    freq = np.bincount(result.choices[:, 0], minlength=model.config.num_choices[0]) / len(test)
    record = {
        "kind": kind,
        "seed": seed,
        "mutual_information": mutual_information(result.choices[:, 0], test.labels),
        "accuracy": result.accuracy,
        "selection_frequency": freq.tolist(),
        "mean_distribution": result.probs[0].mean(axis=0).tolist(),
        "checkpoint_sha256": checkpoint_hash(model),
    }
    if cfg.ablation.entropy_sweep:
        record["entropy_sweep"] = [
            {"gamma_e": p.gamma_e, "accuracy": p.accuracy,
             "distribution": p.distribution[0].tolist(), "frequency": p.frequency[0].tolist()}
            for p in entropy_sweep(model, test, cfg.ablation.entropy_sweep, seed=cfg.sweep.eval_seed)
        ]
    return record


def cmd_ablate_entropy(cfg: ExperimentConfig, out: Path, seed_override: int | None = None) -> dict:
    if len(cfg.model.metalayers) != 1:
        raise ConfigError("the entropy ablation uses a single metalayer")
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    seeds = [seed_override] if seed_override is not None else cfg.ablation.seeds
    runs, diffs = [], []
    for seed in seeds:
        pair = {kind: ablation_run(cfg, kind, seed, train, test, out)
                for kind in ("batch_entropy", "per_example_entropy")}
        runs.extend(pair.values())
        diffs.append(pair["batch_entropy"]["mutual_information"] - pair["per_example_entropy"]["mutual_information"])
    report = {
        "config": dump_config(cfg),
        "gamma_e": cfg.ablation.gamma_e,
        "seeds": seeds,
        "runs": runs,
        "mi_difference": dict(zip(map(str, seeds), diffs)),
        "median_mi_difference": float(np.median(diffs)),
    }
    write_json(report, out / "ablation.json")
    return report


def cmd_eval(cfg: ExperimentConfig, checkpoint, out: Path, workers: int = 1) -> dict:
    model = _load_checkpoint(cfg, checkpoint, out)
    test = load_split(cfg, "test")
    rows = []
    for gamma in sweep_gammas(cfg, model):
        for mode in cfg.sweep.modes:
            p = evaluate(model, test, gamma, mode, cfg.sweep.eval_seed, workers)
            rows.append({"gamma": p.gamma, "mode": mode, "accuracy": p.accuracy,
                         "mean_param_use": p.mean_param_use,
                         "choice_frequency": [f.tolist() for f in p.choice_frequency]})
    report = {"checkpoint_sha256": checkpoint_hash(model), "count": len(test), "results": rows}
    write_json(report, out / "eval.json")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="composer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "sweep", "heatmap", "ablate-entropy", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (INI)")
        p.add_argument("--checkpoint", help="model checkpoint (default: OUT/model.cmpz)")
        p.add_argument("--out", help="output directory (default: experiment.out_dir)")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--workers", type=int, default=1, help="evaluation threads")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, seed=args.seed)
        out = out_dir(cfg, args.out)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.checkpoint, out, args.workers)
        elif args.command == "heatmap":
            cmd_heatmap(cfg, args.checkpoint, out)
        elif args.command == "ablate-entropy":
            report = cmd_ablate_entropy(cfg, out, args.seed)
            print(json.dumps({"median_mi_difference": report["median_mi_difference"]}))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.checkpoint, out, args.workers)["results"]))
    except ComposerError as exc:
        print(f"composer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
