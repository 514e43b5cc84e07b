"""The Composer: a stem, metalayers of candidate modules, and a recurrent
controller that picks one module per metalayer for every input."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from composer import tensor as T
from composer.errors import CheckpointError, ConfigError, DataError, InternalError
from composer.tensor import ParamStore, Tensor

SENTINEL = -1
MAGIC = b"CMPZ1"


@dataclass
class ModuleSpec:
    """One candidate module.

    ``glimpse`` is ``"activations"`` (read the previous metalayer's output),
    ``"full"``, ``"left"``, ``"right"`` or ``"r0,c0,rows,cols"``; everything
    but ``"activations"`` crops the raw input and is only legal in the first
    metalayer.
    """

    hidden: list[int] = field(default_factory=list)
    output: int = 10
    glimpse: str = "activations"


@dataclass
class ComposerConfig:
    input_shape: tuple[int, int]
    num_classes: int
    metalayers: list[list[ModuleSpec]]
    stem: list[int] = field(default_factory=list)
    controller_hidden: int = 32
    controller_pool: int = 4
    gamma_inputs: list[str] = field(default_factory=list)
    gamma_scale: float = 1.0
    head_init: str = "zeros"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.metalayers = [
            [m if isinstance(m, ModuleSpec) else ModuleSpec(**m) for m in layer]
            for layer in self.metalayers
        ]
        self.stem = [int(v) for v in self.stem]
        self.validate()

    def validate(self) -> None:
        if not self.metalayers:
            raise ConfigError("a Composer needs at least one metalayer")
        for i, layer in enumerate(self.metalayers):
            if not layer:
                raise ConfigError(f"metalayer {i} has no modules")
            outs = {m.output for m in layer}
            if len(outs) != 1:
                raise ConfigError(f"metalayer {i} modules disagree on output size: {sorted(outs)}")
            for m in layer:
                if any(h <= 0 for h in m.hidden) or m.output <= 0:
                    raise ConfigError(f"metalayer {i}: layer sizes must be positive")
                if i > 0 and m.glimpse != "activations":
                    raise ConfigError(f"metalayer {i}: glimpses are only allowed in the first metalayer")
        if self.metalayers[-1][0].output != self.num_classes:
            raise ConfigError("last metalayer output size must equal num_classes")
        if self.head_init not in ("zeros", "uniform"):
            raise ConfigError(f"unknown head_init {self.head_init!r}")

    @property
    def input_dim(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    @property
    def num_choices(self) -> list[int]:
        return [len(layer) for layer in self.metalayers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ComposerConfig":
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def glimpse_region(glimpse: str, rows: int, cols: int) -> tuple[int, int, int, int] | None:
    """``(row0, col0, height, width)`` of a glimpse (``None`` for activations)."""
    if glimpse == "activations":
        return None
    if glimpse == "full":
        region = (0, 0, rows, cols)
    elif glimpse == "left":
        region = (0, 0, rows, cols // 2)
    elif glimpse == "right":
        region = (0, cols // 2, rows, cols - cols // 2)
    else:
        try:
            region = tuple(int(v) for v in glimpse.split(","))
        except ValueError:
            raise ConfigError(f"bad glimpse {glimpse!r}") from None
        if len(region) != 4:
            raise ConfigError(f"bad glimpse {glimpse!r}")
    r0, c0, h, w = region
    if h <= 0 or w <= 0 or r0 < 0 or c0 < 0 or r0 + h > rows or c0 + w > cols:
        raise ConfigError(f"glimpse {glimpse!r} outside a {rows}x{cols} input")
    return region


def glimpse_columns(glimpse: str, rows: int, cols: int) -> np.ndarray | None:
    """Flat column indices of a glimpse region (``None`` for activations)."""
    region = glimpse_region(glimpse, rows, cols)
    if region is None:
        return None
    r0, c0, h, w = region
    rr, cc = np.meshgrid(np.arange(r0, r0 + h), np.arange(c0, c0 + w), indexing="ij")
    return (rr * cols + cc).reshape(-1)


def crop(images: np.ndarray, glimpse: str) -> np.ndarray:
    """Crop ``[count, rows, cols]`` images to a glimpse region."""
    _, rows, cols = images.shape
    region = glimpse_region(glimpse, rows, cols)
    if region is None:
        return images
    r0, c0, h, w = region
    return images[:, r0 : r0 + h, c0 : c0 + w]


@dataclass
class ControllerState:
    hidden: Tensor | None
    previous: np.ndarray | int = SENTINEL


@dataclass
class Trajectory:
    choices: list[int]
    distributions: list[np.ndarray]
    path_log_prob: float
    gamma_used: list[float]


@dataclass
class ForwardResult:
    """Batched outcome of one stochastic composition."""

    logits: Tensor
    probs: list[Tensor]
    chosen_log_probs: list[Tensor]
    choices: np.ndarray
    gamma: np.ndarray

    @property
    def path_log_prob(self) -> np.ndarray:
        return np.sum([lp.data for lp in self.chosen_log_probs], axis=0)

    def trajectories(self) -> list[Trajectory]:
        plp = self.path_log_prob
        return [
            Trajectory(
                choices=[int(c) for c in self.choices[e]],
                distributions=[p.data[e].copy() for p in self.probs],
                path_log_prob=float(plp[e]),
                gamma_used=[float(g) for g in self.gamma[e]],
            )
            for e in range(len(self.choices))
        ]


def sample_choice(p, mode: str = "sample", rng: np.random.Generator | None = None) -> int:
    """Draw one module index from a probability vector."""
    u = None if mode == "argmax" else np.array([rng.random()])
    return int(sample_choices(np.asarray(p, dtype=float)[None, :], mode, u)[0])


def sample_choices(P: np.ndarray, mode: str, uniforms: np.ndarray | None = None) -> np.ndarray:
    """Row-wise categorical choice by inverse CDF over one uniform per row.

    ``argmax`` mode returns the lowest index of the maximum probability.
    """
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6) or np.any(P < 0):
        raise InternalError("controller emitted an unnormalised distribution")
    if mode == "argmax":
        return P.argmax(axis=1)
    if mode != "sample":
        raise ConfigError(f"unknown routing mode {mode!r}")
    cdf = np.cumsum(P, axis=1)
    m = P.shape[1]
    last = m - 1 - np.argmax(P[:, ::-1] > 0, axis=1)
    cdf[np.arange(m)[None, :] >= last[:, None]] = np.inf
    return np.argmax(uniforms[:, None] < cdf, axis=1)


def _uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Composer:
    """Parameters plus the forward composition of the model."""

    def __init__(self, config: ComposerConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        rows, cols = config.input_shape

        width = config.input_dim
        for k, h in enumerate(config.stem):
            self._linear(rng, f"stem.{k}", width, h)
            width = h
        self.stem_dim = width

        self.module_layers: list[list[list[str]]] = []
        self.module_cols: list[list[np.ndarray | None]] = []
        self.betas: list[np.ndarray] = []
        for i, layer in enumerate(config.metalayers):
            names, crops, counts = [], [], []
            for j, spec in enumerate(layer):
                cols_idx = glimpse_columns(spec.glimpse, rows, cols) if i == 0 else None
                fan_in = width if cols_idx is None else len(cols_idx)
                prefix = f"ml{i}.mod{j}"
                layer_ids = []
                for k, h in enumerate(spec.hidden + [spec.output]):
                    layer_ids.append(self._linear(rng, f"{prefix}.fc{k}", fan_in, h))
                    fan_in = h
                names.append(layer_ids)
                crops.append(cols_idx)
                counts.append(self.params.count(prefix + "."))
            self.module_layers.append(names)
            self.module_cols.append(crops)
            self.betas.append(np.array(counts, dtype=np.int64))
            width = layer[0].output

        H = config.controller_hidden
        G = len(config.gamma_inputs)
        self.max_choices = max(config.num_choices)
        for i in range(len(config.metalayers)):
            fan = self.controller_feature_dim(i)
            self.params.add(f"ctrl.in{i}.W", _uniform_init(rng, fan, (fan, H)))
        self.params.add("ctrl.prev.W", _uniform_init(rng, self.max_choices, (self.max_choices, H)))
        if G:
            self.params.add("ctrl.gamma.W", _uniform_init(rng, G, (G, H)))
        self.params.add("ctrl.hh.W", _uniform_init(rng, H, (H, H)))
        self.params.add("ctrl.b", np.zeros(H))
        for i, m in enumerate(config.num_choices):
            W = np.zeros((H, m)) if config.head_init == "zeros" else _uniform_init(rng, H, (H, m))
            self.params.add(f"ctrl.head{i}.W", W)
            self.params.add(f"ctrl.head{i}.b", np.zeros(m))

    def _linear(self, rng, prefix: str, fan_in: int, fan_out: int) -> str:
        self.params.add(prefix + ".W", _uniform_init(rng, fan_in, (fan_in, fan_out)))
        self.params.add(prefix + ".b", np.zeros(fan_out))
        return prefix

    # ------------------------------------------------------------- pieces

    @property
    def n_metalayers(self) -> int:
        return len(self.config.metalayers)

    def param_count(self, i: int, j: int) -> int:
        return int(self.betas[i][j])

    @property
    def beta_norm(self) -> list[np.ndarray]:
        return [b / b.max() if b.max() > 0 else np.zeros(len(b)) for b in self.betas]

    def _pools_input(self, i: int) -> bool:
        return i == 0 and not self.config.stem and self.config.controller_pool > 1

    def controller_feature_dim(self, i: int) -> int:
        if self._pools_input(i):
            rows, cols = self.config.input_shape
            k = self.config.controller_pool
            return (rows // k) * (cols // k)
        if i == 0:
            return self.stem_dim
        return self.config.metalayers[i - 1][0].output

    def gamma_matrix(self, gamma, batch: int) -> np.ndarray:
        """Broadcast a preference vector (or per-example matrix) to ``[batch, G]``."""
        G = len(self.config.gamma_inputs)
        if isinstance(gamma, dict):
            missing = set(self.config.gamma_inputs) - set(gamma)
            if missing:
                raise ConfigError(f"missing preference values for {sorted(missing)}")
            gamma = [gamma[k] for k in self.config.gamma_inputs]
        g = np.zeros(G) if gamma is None else np.asarray(gamma, dtype=float)
        if g.ndim == 0:
            g = g[None]
        g = np.broadcast_to(g, (batch, G)) if g.ndim == 1 else g
        if g.shape != (batch, G):
            raise ConfigError(f"gamma shape {g.shape} does not match {G} preference inputs")
        if not np.isfinite(g).all():
            raise ConfigError("gamma must be finite")
        return np.ascontiguousarray(g, dtype=float)

    def stem_forward(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.config.input_dim:
            raise DataError(f"input shape {x.shape} does not match {self.config.input_shape}")
        a = x
        for k in range(len(self.config.stem)):
            a = T.relu(T.affine(a, self.params[f"stem.{k}.W"], self.params[f"stem.{k}.b"]))
        return a

    def controller_step(
        self, i: int, a_prev: Tensor, state: ControllerState, gamma: np.ndarray
    ) -> tuple[Tensor, Tensor, ControllerState]:
        """Return (probabilities, log-probabilities, new state) for metalayer ``i``."""
        P = self.params
        batch = a_prev.data.shape[0]
        if self._pools_input(i):
            rows, cols = self.config.input_shape
            feat = T.avg_pool(a_prev, rows, cols, self.config.controller_pool)
        else:
            feat = a_prev
        pre = T.matmul(feat, P[f"ctrl.in{i}.W"])
        prev = np.broadcast_to(np.asarray(state.previous), (batch,))
        if np.any(prev != SENTINEL):
            onehot = np.zeros((batch, self.max_choices))
            onehot[np.arange(batch), prev] = 1.0
            pre = T.add(pre, T.matmul(Tensor(onehot), P["ctrl.prev.W"]))
        if gamma.shape[1]:
            g = Tensor(gamma * self.config.gamma_scale)
            pre = T.add(pre, T.matmul(g, P["ctrl.gamma.W"]))
        if state.hidden is not None:
            pre = T.add(pre, T.matmul(state.hidden, P["ctrl.hh.W"]))
        h = T.tanh(T.add(pre, P["ctrl.b"]))
        logits = T.affine(h, P[f"ctrl.head{i}.W"], P[f"ctrl.head{i}.b"])
        return T.softmax(logits), T.log_softmax(logits), ControllerState(h, state.previous)

    def module_forward(self, i: int, j: int, a_prev: Tensor, x: Tensor | None = None) -> Tensor:
        cols = self.module_cols[i][j]
        a = a_prev if cols is None else T.take_cols(x, cols)
        ids = self.module_layers[i][j]
        last_layer = i == self.n_metalayers - 1
        for k, pid in enumerate(ids):
            a = T.affine(a, self.params[pid + ".W"], self.params[pid + ".b"])
            if k < len(ids) - 1 or not last_layer:
                a = T.relu(a)
        return a

    # ------------------------------------------------------------ forward

    def forward(
        self,
        x,
        gamma=None,
        mode: str = "sample",
        rng: np.random.Generator | None = None,
        choices: np.ndarray | None = None,
        uniforms: np.ndarray | None = None,
    ) -> ForwardResult:
        """Compose one network per example and run it.

        ``choices`` (shape ``[batch, n]`` or ``[n]``) forces the route; the
        controller still runs so its log-probabilities are available.
        Otherwise ``sample`` mode consumes one uniform per example per
        metalayer (``uniforms`` of shape ``[batch, n]`` or drawn from ``rng``).
        """
        x = T.as_tensor(x)
        batch = x.data.shape[0]
        n = self.n_metalayers
        g = self.gamma_matrix(gamma, batch)
        if choices is not None:
            choices = np.broadcast_to(np.asarray(choices, dtype=np.intp), (batch, n))
        elif mode == "sample" and uniforms is None:
            if rng is None:
                raise ConfigError("sample mode needs an rng")
            uniforms = rng.random((batch, n))
        out_choices = np.zeros((batch, n), dtype=np.intp)
        probs, chosen = [], []
        a = self.stem_forward(x)
        state = ControllerState(hidden=None, previous=SENTINEL)
        for i in range(n):
            p, logp, state = self.controller_step(i, a, state, g)
            if choices is not None:
                c = choices[:, i].copy()
                if c.min() < 0 or c.max() >= len(self.config.metalayers[i]):
                    raise ConfigError(f"forced choice out of range at metalayer {i}")
            else:
                c = sample_choices(p.data, mode, None if uniforms is None else uniforms[:, i])
            out_choices[:, i] = c
            probs.append(p)
            chosen.append(T.pick(logp, c))
            a = self._route(i, c, a, x)
            state = ControllerState(state.hidden, c)
        return ForwardResult(a, probs, chosen, out_choices, g)

    def _route(self, i: int, c: np.ndarray, a: Tensor, x: Tensor) -> Tensor:
        groups = [(j, np.flatnonzero(c == j)) for j in range(len(self.config.metalayers[i]))]
        groups = [(j, ix) for j, ix in groups if ix.size]
        if len(groups) == 1:
            return self.module_forward(i, groups[0][0], a, x)
        parts = [
            self.module_forward(i, j, T.take_rows(a, ix), T.take_rows(x, ix)) for j, ix in groups
        ]
        return T.merge_rows(parts, [ix for _, ix in groups], len(c))


def compose_forward(model: Composer, x, gamma=None, mode="sample", rng=None):
    """Return (logits, trajectories) for a batch."""
    res = model.forward(x, gamma, mode, rng)
    return res.logits, res.trajectories()


# --------------------------------------------------------------- checkpoints


def model_to_bytes(model: Composer) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = model.config.canonical().encode()
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    ids = sorted(model.params.ids())
    buf.write(struct.pack("<I", len(ids)))
    for pid in ids:
        value = model.params.value(pid)
        raw = pid.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(data: bytes) -> Composer:
    if data[:4] == MAGIC[:4] and data[:5] != MAGIC:
        raise CheckpointError(f"unsupported checkpoint version {data[4:5]!r}")
    if data[:5] != MAGIC:
        raise CheckpointError("not a Composer checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (clen,) = r.unpack("<Q")
    try:
        config = ComposerConfig.from_dict(json.loads(r.take(clen).decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupted config block: {exc}") from None
    (count,) = r.unpack("<I")
    values = {}
    for _ in range(count):
        (ilen,) = r.unpack("<H")
        pid = r.take(ilen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        values[pid] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model = Composer(config, seed=0)
    if set(values) != set(model.params.ids()):
        raise CheckpointError("checkpoint parameters do not match its config")
    try:
        model.params.load(values)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from None
    return model


def save_model(model: Composer, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Composer:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return model_from_bytes(data)
