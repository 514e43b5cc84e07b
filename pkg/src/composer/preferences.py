"""Policy preference costs and the train-time preference distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from composer import tensor as T
from composer.errors import ConfigError
from composer.tensor import Tensor

KINDS = ("glimpse", "batch_entropy", "per_example_entropy")
DISTRIBUTIONS = ("constant", "uniform", "log_uniform")


@dataclass
class PreferenceSpec:
    """One preference kind and the distribution its strength is drawn from.

    ``zero_mass`` is the probability of drawing exactly 0 before consulting
    the distribution; it anchors the unconstrained behaviour.
    """

    kind: str
    distribution: str = "constant"
    value: float = 0.0
    low: float = 0.0
    high: float = 1.0
    zero_mass: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown preference kind {self.kind!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown preference distribution {self.distribution!r}")
        if self.distribution == "constant":
            if self.value < 0:
                raise ConfigError("constant preference must be non-negative")
        else:
            if not 0 <= self.low <= self.high:
                raise ConfigError(f"need 0 <= low <= high, got {self.low}, {self.high}")
            if self.distribution == "log_uniform" and self.low <= 0:
                raise ConfigError("log_uniform preference needs low > 0")
        if not 0 <= self.zero_mass <= 1:
            raise ConfigError("zero_mass must lie in [0, 1]")

    @property
    def is_entropy(self) -> bool:
        return self.kind != "glimpse"


def sample_gamma(spec: PreferenceSpec, rng: np.random.Generator) -> float:
    """One preference strength (drawn once per mini-batch by the trainer)."""
    if spec.distribution == "constant":
        return float(spec.value)
    if spec.zero_mass > 0 and rng.random() < spec.zero_mass:
        return 0.0
    if spec.distribution == "uniform":
        return float(rng.uniform(spec.low, spec.high))
    return float(np.exp(rng.uniform(np.log(spec.low), np.log(spec.high))))


def glimpse_cost(choices, beta, gamma) -> np.ndarray:
    """-gamma * sum_i beta[i][c_i] for every example.

    ``choices`` is ``[batch, n]`` (or a list of Trajectory objects) and
    ``beta`` one array of per-module costs per metalayer.
    """
    if isinstance(choices, list) and choices and hasattr(choices[0], "choices"):
        choices = np.array([t.choices for t in choices])
    choices = np.asarray(choices)
    total = np.zeros(len(choices))
    for i, b in enumerate(beta):
        total += np.asarray(b, dtype=float)[choices[:, i]]
    return -np.asarray(gamma, dtype=float) * total


def _as_tensors(probs) -> list[Tensor]:
    return [p if isinstance(p, Tensor) else Tensor(np.atleast_2d(p)) for p in probs]


def batch_entropy_cost(probs, gamma: float) -> Tensor:
    """-gamma * sum_i ||mean_j p_i^(j)||^2, a differentiable scalar.

    ``probs`` holds one ``[batch, m_i]`` array per metalayer.
    """
    total = None
    for p in _as_tensors(probs):
        avg = T.mean(p, axis=0)
        sq = T.tensor_sum(T.mul(avg, avg))
        total = sq if total is None else T.add(total, sq)
    return T.scale(total, -float(gamma))


def per_example_entropy_cost(probs, gamma) -> Tensor:
    """-gamma * sum_i ||p_i||^2 separately for each example, shape ``[batch]``."""
    total = None
    for p in _as_tensors(probs):
        sq = T.tensor_sum(T.mul(p, p), axis=1)
        total = sq if total is None else T.add(total, sq)
    g = np.asarray(gamma, dtype=float)
    return T.scale(total, -float(g)) if g.ndim == 0 else T.mul(total, Tensor(-g))
