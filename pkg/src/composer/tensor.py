"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  :func:`backward` replays the tape in
reverse and accumulates parameter gradients into a :class:`ParamStore`.
Outside a tape every op is a plain numpy computation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from composer.errors import ConfigError, DataError, UsageError

DTYPE = np.float64

_TAPES: list["Tape"] = []


class Tensor:
    """A dense float64 array, optionally a node on the active tape."""

    __slots__ = ("data", "param_id", "requires_grad", "parents", "vjp")

    def __init__(self, data, param_id: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.param_id = param_id
        self.requires_grad = param_id is not None
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", param_id={self.param_id!r}" if self.param_id else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_tape:
    """Context manager that suspends recording (evaluation mode)."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        tape.nodes.append(out)
    return out


class ParamStore:
    """Named parameters with gradient buffers of identical shape."""

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, pid: str, value) -> Tensor:
        if pid in self._leaves:
            raise ConfigError(f"duplicate parameter id {pid!r}")
        leaf = Tensor(np.array(value, dtype=DTYPE), param_id=pid)
        self._leaves[pid] = leaf
        self._grads[pid] = np.zeros_like(leaf.data)
        return leaf

    def __getitem__(self, pid: str) -> Tensor:
        return self._leaves[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._leaves

    def __iter__(self):
        return iter(self._leaves)

    def __len__(self) -> int:
        return len(self._leaves)

    def ids(self) -> list[str]:
        return list(self._leaves)

    def value(self, pid: str) -> np.ndarray:
        return self._leaves[pid].data

    def grad(self, pid: str) -> np.ndarray:
        return self._grads[pid]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def count(self, prefix: str = "") -> int:
        return sum(v.data.size for k, v in self._leaves.items() if k.startswith(prefix))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._leaves.items()}

    def grads_snapshot(self) -> dict[str, np.ndarray]:
        return {k: g.copy() for k, g in self._grads.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            leaf = self._leaves[k]
            if leaf.data.shape != v.shape:
                raise ConfigError(f"shape mismatch for {k}: {leaf.data.shape} vs {v.shape}")
            leaf.data[...] = v

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self._grads.values())


def backward(tape: Tape, outputs, params: ParamStore, seeds=None) -> None:
    """Accumulate d(sum_k seed_k * output_k)/d(param) into ``params``."""
    if isinstance(outputs, Tensor):
        outputs = [outputs]
        seeds = None if seeds is None else [seeds]
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward pass")
    if not tape.nodes:
        raise UsageError("backward called without a recorded forward pass")
    adjoints: dict[int, np.ndarray] = {}
    for k, out in enumerate(outputs):
        seed = np.ones_like(out.data) if seeds is None else np.asarray(seeds[k], dtype=DTYPE)
        if out.param_id is not None:
            params.grad(out.param_id)[...] += seed
            continue
        if not out.requires_grad:
            continue
        prev = adjoints.get(id(out))
        adjoints[id(out)] = seed if prev is None else prev + seed
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.param_id is not None:
                params.grad(parent.param_id)[...] += pg
            else:
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = pg if prev is None else prev + pg
    tape.nodes.clear()
    tape.consumed = True


def sgd_step(params: ParamStore, lr: float) -> None:
    """Gradient ascent: value += lr * grad, then zero the gradients."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for pid in params:
        params[pid].data += lr * params.grad(pid)
    params.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.shape != (W.data.shape[1],):
        raise ConfigError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    if x.data.shape[1] != W.data.shape[0]:
        raise ConfigError(f"affine shape mismatch: x{x.shape} W{W.shape}")
    xd, Wd = x.data, W.data

    def vjp(g):
        return (g @ Wd.T if x.requires_grad else None, xd.T @ g, g.sum(axis=0))

    return _record(xd @ Wd + b.data, (x, W, b), vjp)


def matmul(x: Tensor, W: Tensor) -> Tensor:
    xd, Wd = x.data, W.data
    return _record(
        xd @ Wd,
        (x, W),
        lambda g: (g @ Wd.T if x.requires_grad else None, xd.T @ g if W.requires_grad else None),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _record(x.data * c, (x,), lambda g: (g * c,))


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g, dtype=DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(x.data.sum(axis=axis), (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tensor_sum(x, axis), 1.0 / n)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    if logits.data.shape[-1] < 1:
        raise ConfigError("softmax over an empty axis")
    y = softmax_np(logits.data)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (logits,), vjp)


def log_softmax(logits: Tensor) -> Tensor:
    out = log_softmax_np(logits.data)
    y = np.exp(out)
    return _record(out, (logits,), lambda g: (g - y * g.sum(axis=-1, keepdims=True),))


def pick(x: Tensor, index) -> Tensor:
    """out[b] = x[b, index[b]]."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[rows, index] = g
        return (gx,)

    return _record(x.data[rows, index], (x,), vjp)


def log_likelihood(logits: Tensor, labels) -> Tensor:
    """Per-example log softmax probability of the true label."""
    labels = np.asarray(labels)
    k = logits.data.shape[1]
    if labels.shape != (logits.data.shape[0],):
        raise DataError(f"expected {logits.data.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    return pick(log_softmax(logits), labels)


def take_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[index] = g
        return (gx,)

    return _record(x.data[index], (x,), vjp)


def merge_rows(parts: Sequence[Tensor], indices: Sequence[np.ndarray], n: int) -> Tensor:
    """Scatter ``parts[k]`` into rows ``indices[k]`` of an ``n``-row result."""
    indices = [np.asarray(ix, dtype=np.intp) for ix in indices]
    out = np.empty((n,) + parts[0].data.shape[1:], dtype=DTYPE)
    for part, ix in zip(parts, indices):
        out[ix] = part.data
    return _record(out, tuple(parts), lambda g: tuple(g[ix] for ix in indices))


def take_cols(x: Tensor, cols) -> Tensor:
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[:, cols] = g
        return (gx,)

    return _record(x.data[:, cols], (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(parts))
        )

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def avg_pool(x: Tensor, rows: int, cols: int, k: int) -> Tensor:
    """Average-pool flattened ``rows x cols`` images by ``k x k`` blocks."""
    if rows % k or cols % k:
        raise ConfigError(f"pool factor {k} does not divide image {rows}x{cols}")
    b = x.data.shape[0]
    pooled = x.data.reshape(b, rows // k, k, cols // k, k).mean(axis=(2, 4))

    def vjp(g):
        g = g.reshape(b, rows // k, 1, cols // k, 1) / (k * k)
        return (np.broadcast_to(g, (b, rows // k, k, cols // k, k)).reshape(b, rows * cols),)

    return _record(pooled.reshape(b, -1), (x,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------- test oracle


def finite_diff_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-6,
    ids: Iterable[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must be deterministic and return a scalar Tensor.  With
    ``max_entries`` only a random subset of each parameter is probed.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params)
    backward(tape, loss, params)
    analytic = params.grads_snapshot()
    params.zero_grad()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for pid in ids if ids is not None else params.ids():
        value = params[pid].data
        flat = value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + h
            with no_tape():
                up = float(loss_fn(params).data)
            flat[e] = orig - h
            with no_tape():
                down = float(loss_fn(params).data)
            flat[e] = orig
            fd = (up - down) / (2 * h)
            a = analytic[pid].reshape(-1)[e]
            worst = max(worst, abs(a - fd) / (abs(a) + abs(fd) + 1e-12))
    return worst
