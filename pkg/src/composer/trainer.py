"""Joint REINFORCE training of modules and controller.

The per-batch objective is the expected mean reward

    J = E_c[ (1/N) sum_e (log p(y_e|x_e,c_e) + C1_e + Cpe_e) + C2 ]

and :func:`reinforce_gradient` produces an unbiased single-sample estimate
of dJ/dtheta: a pathwise term (backprop of the reward through its
differentiable dependencies) plus a score-function term.  Gradients are
ascended, never descended.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from composer import tensor as T
from composer.datasets import LabeledDataset, batch_indices
from composer.errors import ConfigError, DivergenceError
from composer.model import Composer, ForwardResult, save_model
from composer.preferences import (
    PreferenceSpec,
    batch_entropy_cost,
    glimpse_cost,
    per_example_entropy_cost,
    sample_gamma,
)
from composer.tensor import Tape, Tensor

MAX_ROUTES = 256
MAX_JOINT_ROUTES = 4096


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.1
    steps: int = 1000
    seed: int = 0
    baseline: str = "moving_average"
    baseline_decay: float = 0.99
    preferences: list[PreferenceSpec] = field(default_factory=list)
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.preferences = [
            p if isinstance(p, PreferenceSpec) else PreferenceSpec(**p) for p in self.preferences
        ]
        if self.batch_size <= 0 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps non-negative")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.baseline not in ("none", "moving_average"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if not 0 <= self.baseline_decay < 1:
            raise ConfigError("baseline_decay must lie in [0, 1)")
        kinds = [p.kind for p in self.preferences]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("each preference kind may appear once")
        if "batch_entropy" in kinds and "per_example_entropy" in kinds:
            raise ConfigError("choose one entropy preference kind")


@dataclass
class RewardBreakdown:
    loglik: np.ndarray
    glimpse: np.ndarray
    per_example_entropy: np.ndarray
    batch_entropy: float
    total: np.ndarray


@dataclass
class StepReport:
    step: int
    reward: float
    loglik: float
    costs: dict
    gamma: dict
    batch_accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class _Objective:
    """Tape nodes and constants making up the reward of one forward pass."""

    loglik: Tensor
    glimpse: np.ndarray
    per_example: Tensor | None
    batch_entropy: Tensor | None

    def breakdown(self) -> RewardBreakdown:
        ll = self.loglik.data.copy()
        cpe = self.per_example.data.copy() if self.per_example is not None else np.zeros_like(ll)
        c2 = float(self.batch_entropy.data) if self.batch_entropy is not None else 0.0
        total = ll + self.glimpse + cpe + c2
        return RewardBreakdown(ll, self.glimpse.copy(), cpe, c2, total)


def _objective(model: Composer, res: ForwardResult, labels, gammas: dict) -> _Objective:
    ll = T.log_likelihood(res.logits, labels)
    batch = len(labels)
    c1 = np.zeros(batch)
    if gammas.get("glimpse", 0.0):
        c1 = glimpse_cost(res.choices, model.beta_norm, gammas["glimpse"])
    cpe = c2 = None
    if "per_example_entropy" in gammas:
        cpe = per_example_entropy_cost(res.probs, gammas["per_example_entropy"])
    if "batch_entropy" in gammas:
        c2 = batch_entropy_cost(res.probs, gammas["batch_entropy"])
    return _Objective(ll, c1, cpe, c2)


def batch_reward(model: Composer, res: ForwardResult, labels, gammas: dict) -> RewardBreakdown:
    """Per-example rewards; the batch entropy cost is broadcast to every example."""
    with T.no_tape():
        return _objective(model, res, labels, gammas).breakdown()


def reinforce_gradient(
    model: Composer,
    x,
    labels,
    gammas: dict,
    rng: np.random.Generator | None = None,
    baseline: float = 0.0,
    choices=None,
    uniforms=None,
) -> tuple[RewardBreakdown, ForwardResult]:
    """Accumulate one sampled-route estimate of dJ/dtheta into ``model.params``.

    Example ``e`` contributes ``(R_e - baseline)/N * grad log p(c_e|x_e)``.
    The batch entropy cost depends on every example's routing, so decisions
    made before the last metalayer additionally carry ``C2 * (1 - 1/N)`` to
    give that cost its full score-function weight; last-metalayer decisions
    cannot influence it.
    """
    n = model.n_metalayers
    with Tape() as tape:
        res = model.forward(x, gammas, "sample", rng, choices=choices, uniforms=uniforms)
        obj = _objective(model, res, labels, gammas)
        path = res.chosen_log_probs[0]
        for lp in res.chosen_log_probs[1:]:
            path = T.add(path, lp)
        early = None
        if obj.batch_entropy is not None and n > 1:
            early = res.chosen_log_probs[0]
            for lp in res.chosen_log_probs[1 : n - 1]:
                early = T.add(early, lp)
    rb = obj.breakdown()
    N = len(labels)
    outputs = [obj.loglik, path]
    seeds = [np.full(N, 1.0 / N), (rb.total - baseline) / N]
    if obj.per_example is not None:
        outputs.append(obj.per_example)
        seeds.append(np.full(N, 1.0 / N))
    if obj.batch_entropy is not None:
        outputs.append(obj.batch_entropy)
        seeds.append(np.array(1.0))
    if early is not None:
        outputs.append(early)
        seeds.append(np.full(N, rb.batch_entropy * (1.0 - 1.0 / N)))
    T.backward(tape, outputs, model.params, seeds)
    return rb, res


def route_table(model: Composer, x, labels, gammas: dict):
    """Enumerate every route: returns (routes, prob[B, R], loglik[B, R])."""
    routes = _routes(model)
    probs, logliks = [], []
    with T.no_tape():
        for r in routes:
            res = model.forward(x, gammas, choices=np.array(r))
            probs.append(np.exp(res.path_log_prob))
            logliks.append(T.log_likelihood(res.logits, labels).data)
    return routes, np.stack(probs, axis=1), np.stack(logliks, axis=1)


def _routes(model: Composer) -> list[tuple[int, ...]]:
    sizes = model.config.num_choices
    if math.prod(sizes) > MAX_ROUTES:
        raise ConfigError(f"{math.prod(sizes)} routes exceed the enumeration guard of {MAX_ROUTES}")
    return list(itertools.product(*[range(m) for m in sizes]))


def enumerate_exact_objective(model: Composer, x, labels, gammas: dict) -> tuple[float, dict]:
    """Exact J and dJ/dtheta by summing over every route (tiny models only)."""
    routes = _routes(model)
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    N = len(labels)
    joint = "batch_entropy" in gammas and model.n_metalayers > 1
    if joint and len(routes) ** N > MAX_JOINT_ROUTES:
        raise ConfigError("joint route enumeration too large")
    model.params.zero_grad()
    with Tape() as tape:
        total = None
        if joint:
            for assignment in itertools.product(routes, repeat=N):
                res = model.forward(x, gammas, choices=np.array(assignment))
                obj = _objective(model, res, labels, gammas)
                value = T.add(obj.loglik, Tensor(obj.glimpse))
                if obj.per_example is not None:
                    value = T.add(value, obj.per_example)
                value = T.add(T.mean(value), obj.batch_entropy)
                prob = T.exp(T.tensor_sum(_path(res)))
                term = T.mul(prob, value)
                total = term if total is None else T.add(total, term)
        else:
            for r in routes:
                res = model.forward(x, gammas, choices=np.array(r))
                obj = _objective(model, res, labels, gammas)
                value = T.add(obj.loglik, Tensor(obj.glimpse))
                if obj.per_example is not None:
                    value = T.add(value, obj.per_example)
                term = T.mean(T.mul(T.exp(_path(res)), value))
                if obj.batch_entropy is not None and total is None:
                    # one metalayer or one example: p does not depend on the route
                    term = T.add(term, obj.batch_entropy)
                total = term if total is None else T.add(total, term)
    T.backward(tape, total, model.params)
    grads = model.params.grads_snapshot()
    model.params.zero_grad()
    return float(total.data), grads


def _path(res: ForwardResult) -> Tensor:
    path = res.chosen_log_probs[0]
    for lp in res.chosen_log_probs[1:]:
        path = T.add(path, lp)
    return path


class Trainer:
    """Stateful REINFORCE trainer (step counter, rng stream, baseline)."""

    def __init__(self, model: Composer, config: TrainConfig):
        kinds = [p.kind for p in config.preferences]
        if kinds != list(model.config.gamma_inputs):
            raise ConfigError(
                f"model expects preference inputs {model.config.gamma_inputs}, config has {kinds}"
            )
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.baseline: float | None = None
        self.step_index = 0

    def sample_gammas(self) -> dict:
        return {p.kind: sample_gamma(p, self.rng) for p in self.config.preferences}

    def train_step(self, x, labels) -> StepReport:
        cfg = self.config
        gammas = self.sample_gammas()
        b = self.baseline if (cfg.baseline == "moving_average" and self.baseline is not None) else 0.0
        params = self.model.params
        params.zero_grad()
        rb, res = reinforce_gradient(self.model, x, labels, gammas, self.rng, baseline=b)
        if not np.isfinite(rb.total).all() or not params.all_finite():
            raise DivergenceError(
                f"non-finite reward or gradient at step {self.step_index} (gamma={gammas})"
            )
        if cfg.lr > 0:
            T.sgd_step(params, cfg.lr)
        else:
            params.zero_grad()
        mean_reward = float(rb.total.mean())
        if cfg.baseline == "moving_average":
            if self.baseline is None:
                self.baseline = mean_reward
            else:
                d = cfg.baseline_decay
                self.baseline = d * self.baseline + (1.0 - d) * mean_reward
        costs = {}
        if "glimpse" in gammas:
            costs["glimpse"] = float(rb.glimpse.mean())
        if "per_example_entropy" in gammas:
            costs["per_example_entropy"] = float(rb.per_example_entropy.mean())
        if "batch_entropy" in gammas:
            costs["batch_entropy"] = rb.batch_entropy
        report = StepReport(
            step=self.step_index,
            reward=mean_reward,
            loglik=float(rb.loglik.mean()),
            costs=costs,
            gamma=gammas,
            batch_accuracy=float((res.logits.data.argmax(axis=1) == labels).mean()),
        )
        self.step_index += 1
        return report


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 7, epoch]).generate_state(1)[0])


def iter_batches(dataset: LabeledDataset, N: int, seed: int, steps: int):
    """Exactly ``steps`` batches, reshuffling at every epoch boundary."""
    done, epoch = 0, 0
    while done < steps:
        for index in batch_indices(len(dataset), N, epoch_seed(seed, epoch)):
            if done == steps:
                return
            yield dataset.batch(index)
            done += 1
        epoch += 1


def train_loop(
    model: Composer,
    dataset: LabeledDataset,
    config: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    eval_hook: Callable[[int, Composer], None] | None = None,
) -> list[StepReport]:
    """Run ``config.steps`` REINFORCE steps; returns the report stream.

    Reports are appended to ``log_path`` as JSON lines.  With
    ``checkpoint_every`` set, ``checkpoint_dir/step_{k}.cmpz`` is written
    every k steps.  On divergence the last good parameters are saved to
    ``checkpoint_dir/last_good.cmpz`` before the error propagates.
    """
    trainer = Trainer(model, config)
    return _run(trainer.train_step, model, dataset, config, log_path, checkpoint_dir, eval_hook)


def _run(step_fn, model, dataset, config, log_path, checkpoint_dir, eval_hook):
    reports = []
    log = open(log_path, "a") if log_path else None
    try:
        batches = iter_batches(dataset, config.batch_size, config.seed, config.steps)
        for k, (x, y) in enumerate(batches, start=1):
            try:
                report = step_fn(x, y)
            except DivergenceError:
                if checkpoint_dir is not None:
                    save_model(model, Path(checkpoint_dir) / "last_good.cmpz")
                raise
            reports.append(report)
            if log:
                log.write(report.to_json() + "\n")
            if checkpoint_dir is not None and config.checkpoint_every and k % config.checkpoint_every == 0:
                save_model(model, Path(checkpoint_dir) / f"step_{k}.cmpz")
            if eval_hook is not None and config.eval_every and k % config.eval_every == 0:
                eval_hook(k, model)
    finally:
        if log:
            log.close()
    return reports


class SupervisedTrainer:
    """Plain backprop of the mean log-likelihood through module 0 of every
    metalayer; the reference the single-module Composer must reproduce."""

    def __init__(self, model: Composer, config: TrainConfig):
        self.model = model
        self.config = config
        self.step_index = 0

    def train_step(self, x, labels) -> StepReport:
        model = self.model
        params = model.params
        params.zero_grad()
        N = len(labels)
        with Tape() as tape:
            xt = T.as_tensor(x)
            a = model.stem_forward(xt)
            for i in range(model.n_metalayers):
                a = model.module_forward(i, 0, a, xt)
            ll = T.log_likelihood(a, labels)
        T.backward(tape, [ll], params, [np.full(N, 1.0 / N)])
        if self.config.lr > 0:
            T.sgd_step(params, self.config.lr)
        else:
            params.zero_grad()
        mean_ll = float(ll.data.mean())
        report = StepReport(
            step=self.step_index,
            reward=float((ll.data + 0.0).mean()),
            loglik=mean_ll,
            costs={},
            gamma={},
            batch_accuracy=float((a.data.argmax(axis=1) == labels).mean()),
        )
        self.step_index += 1
        return report


def supervised_train_loop(model, dataset, config, log_path=None) -> list[StepReport]:
    trainer = SupervisedTrainer(model, config)
    return _run(trainer.train_step, model, dataset, config, log_path, None, None)
