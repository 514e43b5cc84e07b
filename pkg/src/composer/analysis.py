"""Evaluation, preference sweeps, the random-mixing baseline, routing
heatmaps and mutual-information diagnostics."""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from composer import tensor as T
from composer.datasets import LabeledDataset
from composer.errors import ConfigError, InternalError, UsageError
from composer.model import Composer, model_to_bytes

SWEEP_HEADER = [
    "gamma_g", "gamma_e", "accuracy", "mean_param_use", "mode", "seed",
    "kind", "rho", "expected_param_use", "checkpoint_sha256",
]


@dataclass
class EvalResult:
    """Per-example outcome of evaluating one checkpoint at one preference."""

    predictions: np.ndarray
    labels: np.ndarray
    choices: np.ndarray
    probs: list[np.ndarray]
    param_use: np.ndarray
    expected_param_use: np.ndarray

    @property
    def accuracy(self) -> float:
        return float((self.predictions == self.labels).mean())


@dataclass
class SweepPoint:
    gamma: dict
    mode: str
    accuracy: float
    mean_param_use: float
    expected_param_use: float
    choice_distribution: list[np.ndarray]
    choice_frequency: list[np.ndarray]
    seed: int | None = None
    kind: str = "composer"
    rho: float | None = None
    checkpoint_sha256: str = ""


@dataclass
class Heatmap:
    """Mean controller probabilities per (true class, module)."""

    matrix: np.ndarray
    metalayer: int
    gamma: dict
    classes: list[int] = field(default_factory=list)
    counts: np.ndarray | None = None


def checkpoint_hash(model: Composer) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


def _chunks(count: int, size: int) -> list[slice]:
    return [slice(s, min(s + size, count)) for s in range(0, count, size)]


def evaluate_examples(
    model: Composer,
    dataset: LabeledDataset,
    gamma=None,
    mode: str = "argmax",
    rng: np.random.Generator | None = None,
    choices: np.ndarray | None = None,
    workers: int = 1,
    chunk: int = 2000,
) -> EvalResult:
    """Tape-free evaluation over a dataset.

    Uniform variates for sampled routing are drawn for the whole dataset up
    front, so results do not depend on ``workers`` or ``chunk``.
    """
    count = len(dataset)
    n = model.n_metalayers
    uniforms = None
    if mode == "sample" and choices is None:
        if rng is None:
            raise ConfigError("sample-mode evaluation needs an rng")
        uniforms = rng.random((count, n))

    def run(sl: slice):
        x, _ = dataset.batch(np.arange(sl.start, sl.stop))
        forced = None if choices is None else choices[sl]
        u = None if uniforms is None else uniforms[sl]
        with T.no_tape():
            res = model.forward(x, gamma, mode, choices=forced, uniforms=u)
        return res.logits.data.argmax(axis=1), res.choices, [p.data for p in res.probs]

    slices = _chunks(count, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, slices))
    else:
        parts = [run(sl) for sl in slices]
    preds = np.concatenate([p[0] for p in parts])
    chosen = np.concatenate([p[1] for p in parts])
    probs = [np.concatenate([p[2][i] for p in parts]) for i in range(n)]
    use = np.zeros(count)
    expected = np.zeros(count)
    for i, beta in enumerate(model.betas):
        use += beta[chosen[:, i]]
        expected += probs[i] @ beta.astype(float)
    return EvalResult(preds, dataset.labels, chosen, probs, use, expected)


def _point(model, result: EvalResult, gamma, mode, seed, **extra) -> SweepPoint:
    freq = [
        np.bincount(result.choices[:, i], minlength=m) / len(result.labels)
        for i, m in enumerate(model.config.num_choices)
    ]
    return SweepPoint(
        gamma=_gamma_dict(model, gamma),
        mode=mode,
        accuracy=result.accuracy,
        mean_param_use=float(result.param_use.mean()),
        expected_param_use=float(result.expected_param_use.mean()),
        choice_distribution=[p.mean(axis=0) for p in result.probs],
        choice_frequency=freq,
        seed=seed,
        **extra,
    )


def _gamma_dict(model: Composer, gamma) -> dict:
    if isinstance(gamma, dict):
        return dict(gamma)
    if gamma is None:
        return {}
    values = np.atleast_1d(np.asarray(gamma, dtype=float))
    return dict(zip(model.config.gamma_inputs, values.tolist()))


def evaluate(
    model: Composer,
    dataset: LabeledDataset,
    gamma=None,
    mode: str = "argmax",
    seed: int | None = None,
    workers: int = 1,
    choices: np.ndarray | None = None,
) -> SweepPoint:
    """Accuracy and parameter use (raw counts) at one preference setting."""
    rng = None if seed is None else np.random.default_rng(seed)
    result = evaluate_examples(model, dataset, gamma, mode, rng, choices, workers)
    return _point(model, result, gamma, mode, seed)


def preference_sweep(
    model: Composer,
    dataset: LabeledDataset,
    gammas: list,
    modes=("argmax",),
    seed: int = 0,
    workers: int = 1,
) -> list[SweepPoint]:
    """Evaluate one fixed checkpoint at every preference setting, no retraining."""
    if not gammas:
        raise ConfigError("preference sweep needs at least one gamma")
    digest = checkpoint_hash(model)
    points = []
    for gamma in gammas:
        for mode in modes:
            point = evaluate(model, dataset, gamma, mode, seed, workers)
            point.checkpoint_sha256 = digest
            points.append(point)
    if checkpoint_hash(model) != digest:
        raise InternalError("model parameters changed during a sweep")
    return points


def large_small(model: Composer) -> tuple[int, int]:
    if model.config.num_choices != [2]:
        raise ConfigError("random-mixing baseline needs exactly 1 metalayer with 2 modules")
    beta = model.betas[0]
    large = int(np.argmax(beta))
    return large, 1 - large


def random_mixing_baseline(
    model: Composer,
    dataset: LabeledDataset,
    rhos: list[float],
    seed: int = 0,
    gamma=None,
    workers: int = 1,
) -> list[SweepPoint]:
    """Route each example to the large module with probability rho, ignoring the controller."""
    large, small = large_small(model)
    rng = np.random.default_rng(seed)
    digest = checkpoint_hash(model)
    points = []
    for rho in rhos:
        if not 0 <= rho <= 1:
            raise ConfigError(f"mixing fraction {rho} outside [0, 1]")
        u = rng.random(len(dataset))
        forced = np.where(u < rho, large, small)[:, None]
        result = evaluate_examples(model, dataset, gamma, "argmax", choices=forced, workers=workers)
        points.append(
            _point(model, result, gamma, "baseline", seed, kind="random_mixing", rho=float(rho),
                   checkpoint_sha256=digest)
        )
    return points


def interpolate_baseline(baseline: list[SweepPoint], param_use: float) -> float:
    """Baseline accuracy at a given mean parameter use (piecewise linear)."""
    pts = sorted((p.mean_param_use, p.accuracy) for p in baseline)
    xs, ys = zip(*pts)
    return float(np.interp(param_use, xs, ys))


def module_class_heatmap(
    model: Composer,
    dataset: LabeledDataset,
    gamma=None,
    metalayer: int = 0,
    mode: str = "argmax",
    seed: int | None = 0,
    result: EvalResult | None = None,
) -> Heatmap:
    """Mean of the controller's distribution at one metalayer, grouped by true class."""
    if result is None:
        rng = None if seed is None else np.random.default_rng(seed)
        result = evaluate_examples(model, dataset, gamma, mode, rng)
    probs = result.probs[metalayer]
    K = dataset.num_classes
    matrix = np.full((K, probs.shape[1]), np.nan)
    counts = np.bincount(dataset.labels, minlength=K)
    for k in range(K):
        if counts[k]:
            matrix[k] = probs[dataset.labels == k].mean(axis=0)
    return Heatmap(matrix, metalayer, _gamma_dict(model, gamma), list(range(K)), counts)


def mutual_information(choices, labels) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    choices = np.asarray(choices).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(choices) != len(labels):
        raise UsageError(f"length mismatch: {len(choices)} choices vs {len(labels)} labels")
    if len(choices) == 0:
        raise UsageError("mutual information needs at least one sample")
    _, a = np.unique(choices, return_inverse=True)
    _, b = np.unique(labels, return_inverse=True)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    return mutual_information_table(joint)


def mutual_information_table(joint) -> float:
    joint = np.asarray(joint, dtype=float)
    joint = joint / joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(max(0.0, np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz]))))


@dataclass
class EntropyPoint:
    gamma_e: float
    accuracy: float
    distribution: list[np.ndarray]
    frequency: list[np.ndarray]


def entropy_sweep(
    model: Composer,
    dataset: LabeledDataset,
    gamma_es: list[float],
    base_gamma: dict | None = None,
    mode: str = "sample",
    seed: int = 0,
    kind: str | None = None,
) -> list[EntropyPoint]:
    """Module selection distributions as the test-time entropy preference varies."""
    entropy_kinds = [k for k in model.config.gamma_inputs if k.endswith("entropy")]
    if kind is None:
        if not entropy_kinds:
            raise ConfigError("model was not trained with an entropy preference input")
        kind = entropy_kinds[0]
    out = []
    for g in gamma_es:
        gamma = dict(base_gamma or {}, **{kind: float(g)})
        point = evaluate(model, dataset, gamma, mode, seed)
        out.append(EntropyPoint(float(g), point.accuracy, point.choice_distribution, point.choice_frequency))
    return out


# ------------------------------------------------------------------ emitters


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_rows(points: list[SweepPoint]) -> list[list[str]]:
    rows = []
    for p in points:
        rows.append([
            _fmt(p.gamma.get("glimpse")),
            _fmt(p.gamma.get("batch_entropy", p.gamma.get("per_example_entropy"))),
            _fmt(p.accuracy), _fmt(p.mean_param_use), p.mode, _fmt(p.seed),
            p.kind, _fmt(p.rho), _fmt(p.expected_param_use), p.checkpoint_sha256,
        ])
    return rows


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(sweep_rows(points))


def write_heatmap_csv(heatmap: Heatmap, path, betas=None, right_first: bool = False) -> None:
    """Rows are class labels, columns modules.  ``right_first`` lists labels
    10-19 above 0-9, the usual Wide-MNIST figure layout."""
    order = list(heatmap.classes)
    if right_first and len(order) == 20:
        order = order[10:] + order[:10]
    m = heatmap.matrix.shape[1]
    cols = [f"module_{j}" if betas is None else f"module_{j}_params_{int(betas[j])}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + cols)
        for k in order:
            w.writerow([k] + [repr(float(v)) for v in heatmap.matrix[k]])


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")
