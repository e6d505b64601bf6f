"""Modality encoders, fusion heads and Cox training.

Every model maps a dict of per-modality feature matrices to one log-risk per
patient. Parameter names carry their owner as a prefix (``enc.<modality>.``
or ``head.``) so that per-component learning rates can be resolved by name.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .seeding import derive_seed
from .survival import NoComparablePairsError, concordance_index, cox_loss
from .tensor import Node, ParamStore

STRATEGIES = ("unimodal", "early", "late", "joint", "bilinear", "cross_attention", "gated")
ATTENTION_HEADS = ("bilinear", "cross_attention", "gated")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class EncoderSpec:
    """Feed-forward encoder; ``output_dim=None`` passes features through unchanged."""

    input_dim: int
    hidden: tuple[int, ...] = ()
    output_dim: int | None = None
    dropout: float = 0.5
    lr: float = 1e-5

    @property
    def out_dim(self) -> int:
        return self.input_dim if self.output_dim is None else self.output_dim

    @property
    def identity(self) -> bool:
        return self.output_dim is None


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 512
    dropout: float = 0.3
    attention_dim: int = 256
    attention_dropout: float = 0.25
    tokens: int = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    head_lr: float = 1e-4
    patience: int = 10
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.head_lr <= 0:
            raise ValueError("learning rates must be > 0")


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class DropoutStream:
    """Hands each dropout call in one forward pass its own seed."""

    def __init__(self, train: bool, seed: int = 0):
        self.train = train
        self.seed = seed
        self.count = 0

    def __call__(self, x, rate: float) -> Node:
        if not self.train or rate == 0.0:
            return x
        self.count += 1
        return T.dropout(x, rate, derive_seed(self.seed, self.count), train=True)


def _linear(params: ParamStore, name: str, fan_in: int, fan_out: int, rng) -> tuple[Node, Node]:
    w = params.add(f"{name}.W", he_uniform(rng, fan_in, fan_out))
    b = params.add(f"{name}.b", np.zeros((1, fan_out)))
    return w, b


class Encoder:
    def __init__(self, spec: EncoderSpec, params: ParamStore, prefix: str, rng):
        if spec.identity and spec.hidden:
            raise ValueError("hidden layers need an output_dim")
        self.spec = spec
        self.layers = []
        if not spec.identity:
            widths = [spec.input_dim, *spec.hidden, spec.output_dim]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                self.layers.append(_linear(params, f"{prefix}.{i}", a, b, rng))

    def __call__(self, x: Node, drop: DropoutStream) -> Node:
        if x.shape[1] != self.spec.input_dim:
            raise T.ShapeError("encoder", x.shape, (x.shape[0], self.spec.input_dim))
        for w, b in self.layers:
            x = drop(T.relu(T.affine(x, w, b)), self.spec.dropout)
        return x


class LinearRiskHead:
    """One embedding straight to a scalar risk.

    Weights start at zero, the usual starting point for a linear Cox fit: a
    random start on raw features is a random risk direction that a few dozen
    small Adam steps cannot undo.
    """

    n_inputs = 1

    def __init__(self, dims: Sequence[int], cfg: HeadConfig, params: ParamStore, rng):
        (self.dim,) = dims
        self.w = params.add("head.out.W", np.zeros((self.dim, 1)))
        self.b = params.add("head.out.b", np.zeros((1, 1)))

    def __call__(self, xs: Sequence[Node], drop: DropoutStream) -> Node:
        return T.affine(xs[0], self.w, self.b)


class EarlyFusionHead:
    """concat -> hidden (ReLU, dropout) -> scalar."""

    n_inputs = None

    def __init__(self, dims: Sequence[int], cfg: HeadConfig, params: ParamStore, rng):
        if len(dims) < 2:
            raise ValueError("early fusion needs at least two embeddings")
        self.dims = tuple(dims)
        self.dropout = cfg.dropout
        self.hidden = _linear(params, "head.hidden", sum(dims), cfg.hidden, rng)
        self.out = _linear(params, "head.out", cfg.hidden, 1, rng)

    def __call__(self, xs: Sequence[Node], drop: DropoutStream) -> Node:
        if len(xs) != len(self.dims):
            raise ValueError(f"expected {len(self.dims)} embeddings, got {len(xs)}")
        h = drop(T.relu(T.affine(T.concat(xs), *self.hidden)), self.dropout)
        return T.affine(h, *self.out)


class BilinearHead:
    """risk = (x_a P_a + c_a) W (x_b P_b + c_b)^T for each patient."""

    n_inputs = 2

    def __init__(self, dims: Sequence[int], cfg: HeadConfig, params: ParamStore, rng):
        da, db = dims
        d = cfg.attention_dim
        self.dropout = cfg.attention_dropout
        self.proj_a = _linear(params, "head.proj_a", da, d, rng)
        self.proj_b = _linear(params, "head.proj_b", db, d, rng)
        self.W = params.add("head.bilinear", he_uniform(rng, d, d) / math.sqrt(d))

    def __call__(self, xs: Sequence[Node], drop: DropoutStream) -> Node:
        a = drop(T.affine(xs[0], *self.proj_a), self.dropout)
        b = drop(T.affine(xs[1], *self.proj_b), self.dropout)
        return T.sum_cols(T.mul(T.matmul(a, self.W), b))


class CrossAttentionHead:
    """Queries from the first modality attend over keys/values from the second.

    Each embedding is split into ``tokens`` equal chunks; with one token the
    softmax weight is 1 and the attended output is the value projection.
    """

    n_inputs = 2

    def __init__(self, dims: Sequence[int], cfg: HeadConfig, params: ParamStore, rng):
        da, db = dims
        t = cfg.tokens
        if da % t or db % t:
            raise ValueError(f"embedding dims {dims} not divisible into {t} tokens")
        self.tokens = t
        self.dims = (da, db)
        d = cfg.attention_dim
        self.scale = 1.0 / math.sqrt(d)
        self.dropout = cfg.attention_dropout
        self.q = _linear(params, "head.query", da // t, d, rng)
        self.k = _linear(params, "head.key", db // t, d, rng)
        self.v = _linear(params, "head.value", db // t, d, rng)
        self.mlp = _linear(params, "head.mlp", d * t, d, rng)
        self.out = _linear(params, "head.out", d, 1, rng)

    def attend(self, xa: Node, xb: Node) -> tuple[list[Node], list[Node]]:
        """Attended outputs and attention weights, one per query token."""
        t = self.tokens
        sa, sb = self.dims[0] // t, self.dims[1] // t
        qs = [T.affine(T.slice_cols(xa, i * sa, (i + 1) * sa), *self.q) for i in range(t)]
        kvs = [T.slice_cols(xb, j * sb, (j + 1) * sb) for j in range(t)]
        ks = [T.affine(x, *self.k) for x in kvs]
        vs = [T.affine(x, *self.v) for x in kvs]
        outputs, weights = [], []
        for q in qs:
            scores = T.concat([T.scale(T.sum_cols(T.mul(q, k)), self.scale) for k in ks])
            attn = T.softmax_rows(scores)
            mixed = None
            for j, v in enumerate(vs):
                term = T.mul(T.slice_cols(attn, j, j + 1), v)
                mixed = term if mixed is None else T.add(mixed, term)
            outputs.append(mixed)
            weights.append(attn)
        return outputs, weights

    def __call__(self, xs: Sequence[Node], drop: DropoutStream) -> Node:
        outputs, _ = self.attend(xs[0], xs[1])
        h = drop(T.relu(T.affine(T.concat(outputs), *self.mlp)), self.dropout)
        return T.affine(h, *self.out)


class GatedHead:
    """y = g(x_a) * x_b + (1 - g(x_a)) * x_a with a sigmoid gate, then linear."""

    n_inputs = 2

    def __init__(self, dims: Sequence[int], cfg: HeadConfig, params: ParamStore, rng):
        da, db = dims
        if da != db:
            raise ValueError(f"gated fusion blends equal-width embeddings, got {da} and {db}")
        self.dropout = cfg.attention_dropout
        self.gate_layer = _linear(params, "head.gate", da, da, rng)
        self.out = _linear(params, "head.out", da, 1, rng)

    def gate(self, xa: Node) -> Node:
        return T.sigmoid(T.affine(xa, *self.gate_layer))

    def blend(self, xa: Node, xb: Node, gate: Node | None = None) -> Node:
        g = self.gate(xa) if gate is None else gate
        return T.add(T.mul(g, xb), T.mul(T.sub(1.0, g), xa))

    def __call__(self, xs: Sequence[Node], drop: DropoutStream) -> Node:
        y = drop(self.blend(xs[0], xs[1]), self.dropout)
        return T.affine(y, *self.out)


HEADS = {
    "unimodal": LinearRiskHead,
    "early": EarlyFusionHead,
    "joint": EarlyFusionHead,
    "bilinear": BilinearHead,
    "cross_attention": CrossAttentionHead,
    "gated": GatedHead,
}


class FusionModel:
    """Encoders (one per modality) feeding a fusion head that outputs log-risk."""

    def __init__(self, strategy: str, encoders: Mapping[str, EncoderSpec],
                 head: HeadConfig | None = None, seed: int = 0, head_lr: float = 1e-4):
        if strategy not in HEADS:
            raise ValueError(f"strategy {strategy!r} has no single-network form; "
                             f"choose from {sorted(HEADS)}")
        self.strategy = strategy
        self.modalities = tuple(encoders)
        self.head_cfg = head or HeadConfig()
        self.head_lr = head_lr
        count = len(self.modalities)
        if strategy == "unimodal" and count != 1:
            raise ValueError("unimodal models take exactly one modality")
        if strategy in ATTENTION_HEADS and count != 2:
            raise ValueError(f"{strategy} fusion takes exactly two modalities, got {count}")
        if strategy in ("early", "joint") and count < 2:
            raise ValueError(f"{strategy} fusion needs at least two modalities")
        self.specs = dict(encoders)
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        self.encoders = {m: Encoder(s, self.params, f"enc.{m}", rng) for m, s in encoders.items()}
        dims = [s.out_dim for s in encoders.values()]
        self.head = HEADS[strategy](dims, self.head_cfg, self.params, rng)

    @classmethod
    def build(cls, strategy: str, input_dims: Mapping[str, int],
              encoders: Mapping[str, EncoderSpec] | None = None, **kwargs) -> "FusionModel":
        """Identity encoders for any modality without an explicit spec."""
        encoders = dict(encoders or {})
        specs = OrderedDict()
        for m, dim in input_dims.items():
            spec = encoders.get(m) or EncoderSpec(dim)
            if spec.input_dim != dim:
                raise T.ShapeError(f"encoder {m}", (spec.input_dim,), (dim,))
            specs[m] = spec
        return cls(strategy, specs, **kwargs)

    def lr_for(self, name: str) -> float:
        if name.startswith("enc."):
            modality = name.split(".")[1]
            # frozen-feature early fusion never updates its encoders
            return 0.0 if self.strategy == "early" else self.specs[modality].lr
        return self.head_lr

    def forward(self, inputs: Mapping[str, np.ndarray], train: bool = False, seed: int = 0) -> Node:
        drop = DropoutStream(train, seed)
        embeddings = []
        for m in self.modalities:
            if m not in inputs:
                raise KeyError(f"missing input for modality {m!r}")
            embeddings.append(self.encoders[m](T.constant(inputs[m]), drop))
        return self.head(embeddings, drop)

    def predict(self, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.forward(inputs, train=False).value[:, 0].copy()

    def embed(self, inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        drop = DropoutStream(False)
        return [self.encoders[m](T.constant(inputs[m]), drop).value for m in self.modalities]


def count_params(model: FusionModel) -> int:
    return model.params.size()


def cox_objective(risk: Node, time, event) -> Node:
    """Mean-per-event Cox negative log partial likelihood as a graph node."""
    value, grad = cox_loss(risk.value[:, 0], time, event, reduction="mean")
    return T.attach_loss(risk, value, grad)


# ----------------------------------------------------------------- training

@dataclass
class ModelData:
    inputs: dict[str, np.ndarray]
    time: np.ndarray
    event: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    def take(self, idx) -> "ModelData":
        return ModelData({m: x[idx] for m, x in self.inputs.items()}, self.time[idx], self.event[idx])


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_ci: float


@dataclass
class TrainResult:
    model: FusionModel
    trace: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ci: float = float("nan")
    stopped_early: bool = False


def _safe_ci(risk, time, event) -> float:
    try:
        return concordance_index(risk, time, event)
    except NoComparablePairsError:
        return float("nan")


def train_model(model: FusionModel, train: ModelData, config: TrainConfig,
                val: ModelData | None = None) -> TrainResult:
    """Adam on the Cox loss, keeping the snapshot with the best validation CI.

    Without ``val`` all epochs run and the final parameters are kept.
    Training stops once ``patience`` epochs pass without a strictly better
    validation CI.
    """
    if not np.any(train.event):
        raise TrainingAborted("no events in the training set")
    state = T.AdamState.for_params(model.params, model.lr_for)
    result = TrainResult(model)
    best_state = None
    best_ci = -math.inf
    since_best = 0
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        if config.batch_size is None or config.batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = np.random.default_rng(derive_seed(config.seed, epoch, 0)).permutation(n)
            batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        losses = []
        for b, idx in enumerate(batches):
            if not np.any(train.event[idx]):
                continue
            batch = train if idx.size == n else train.take(idx)
            model.params.zero_grad()
            risk = model.forward(batch.inputs, train=True, seed=derive_seed(config.seed, epoch, b + 1))
            if not np.all(np.isfinite(risk.value)):
                raise TrainingAborted(f"non-finite risk at epoch {epoch}", result.trace)
            loss = cox_objective(risk, batch.time, batch.event)
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", result.trace)
            T.backward(loss)
            try:
                T.adam_step(model.params, state)
            except T.NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}", result.trace) from exc
            losses.append(value)
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        if val is None:
            result.trace.append(EpochRecord(epoch, epoch_loss, float("nan")))
            result.best_epoch = epoch
            continue
        val_risk = model.predict(val.inputs)
        if not np.all(np.isfinite(val_risk)):
            raise TrainingAborted(f"non-finite validation risk at epoch {epoch}", result.trace)
        ci = _safe_ci(val_risk, val.time, val.event)
        result.trace.append(EpochRecord(epoch, epoch_loss, ci))
        if best_state is None or ci > best_ci:
            best_ci = ci if math.isfinite(ci) else -math.inf
            best_state = model.params.snapshot()
            result.best_epoch = epoch
            result.best_val_ci = ci
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                break
    if best_state is not None:
        model.params.load(best_state)
    return result


# --------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"GFCKPT01"
#   uint32    tensor count N
#   N times:  uint16 name length, UTF-8 name, uint8 ndim, ndim x uint64 shape
#   then the N tensors' float64 values, row-major, in header order

_MAGIC = b"GFCKPT01"


def save_checkpoint(tensors: Mapping[str, np.ndarray] | ParamStore, path) -> None:
    if isinstance(tensors, ParamStore):
        tensors = tensors.snapshot()
    header = [_MAGIC, struct.pack("<I", len(tensors))]
    body = []
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", value.ndim))
        header.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        body.append(value.tobytes())
    Path(path).write_bytes(b"".join(header + body))


def load_checkpoint(path) -> OrderedDict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,), pos = struct.unpack_from("<I", data, 8), 12
    table = []
    for _ in range(count):
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + length].decode("utf-8")
        pos += length
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        table.append((name, shape))
    out = OrderedDict()
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
