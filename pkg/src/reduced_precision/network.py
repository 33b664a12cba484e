"""A small CNN trained from scratch under emulated reduced precision.

Architecture: ``conv -> relu -> maxpool`` for each conv layer, flatten, a
stack of ReLU dense layers, and a dense softmax head. Parameters are stored
as float32 and trained with RMSprop on a cross-entropy loss.

Truncation policies (``PrecisionConfig.granularity``):

* batch: parameters are quantized after every mini-batch update
  (or once per epoch with ``TrainConfig.quantize_every="epoch"``);
* layer: as batch, plus every layer output and every backward-pass gradient
  tensor is quantized;
* op: every elementary add/multiply inside the kernels is quantized;
* none: plain float32.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from reduced_precision import tensor as T
from reduced_precision.data import Dataset, batches
from reduced_precision.quant import Granularity, PrecisionConfig, make_rng
from reduced_precision.tensor import ArithContext, ShapeError

log = logging.getLogger(__name__)

F32 = np.float32

# independent rng streams derived from TrainConfig.seed
_INIT_STREAM = 0
_ROUNDING_STREAM = 2


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, what: str = "non-finite gradient"):
        super().__init__(f"{what} in epoch {epoch}")
        self.epoch = epoch


class StaleTraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvLayerSpec:
    filters: int
    kernel: tuple[int, int] = (5, 5)


@dataclass(frozen=True)
class NetworkSpec:
    conv_layers: tuple[ConvLayerSpec, ...] = (ConvLayerSpec(8), ConvLayerSpec(16))
    dense_layers: int = 1
    dense_units: int = 100
    input_shape: tuple[int, int, int] = (28, 28, 1)
    classes: int = 10

    def __post_init__(self):
        object.__setattr__(
            self,
            "conv_layers",
            tuple(c if isinstance(c, ConvLayerSpec) else ConvLayerSpec(c[0], tuple(c[1])) for c in self.conv_layers),
        )
        if self.dense_layers < 0 or self.dense_units < 1 or self.classes < 2:
            raise ValueError("need dense_layers >= 0, dense_units >= 1, classes >= 2")
        self.feature_shapes()  # validates spatial dims

    def feature_shapes(self):
        """Spatial shape ``(C, H, W)`` after each conv+pool stage, starting with the input."""
        h, w, c = self.input_shape
        shapes = [(c, h, w)]
        for layer in self.conv_layers:
            m, n = layer.kernel
            h, w = h - m + 1, w - n + 1
            if h < 2 or w < 2:
                raise ValueError(f"conv {layer} leaves a {h}x{w} map; too small to pool")
            h, w, c = h // 2, w // 2, layer.filters
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_features(self) -> int:
        return int(np.prod(self.feature_shapes()[-1]))

    def param_shapes(self):
        """``(weight_shape, bias_shape)`` per layer, conv layers first."""
        shapes = []
        c = self.input_shape[2]
        for layer in self.conv_layers:
            shapes.append(((layer.filters, c, *layer.kernel), (layer.filters,)))
            c = layer.filters
        fan_in = self.flat_features
        for _ in range(self.dense_layers):
            shapes.append(((self.dense_units, fan_in), (self.dense_units,)))
            fan_in = self.dense_units
        shapes.append(((self.classes, fan_in), (self.classes,)))
        return shapes


@dataclass
class Params:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self):
        return [*self.weights, *self.biases]

    def copy(self) -> "Params":
        return Params([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def map(self, fn) -> "Params":
        return Params([fn(w) for w in self.weights], [fn(b) for b in self.biases])

    def check_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


Grads = Params


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    seed: int = 0
    init_scale: float = 0.05
    init_perturbation: float = 0.0
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)
    quantize_every: str = "batch"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.init_perturbation < 0:
            raise ValueError("init_perturbation must be >= 0")
        if self.quantize_every not in ("batch", "epoch"):
            raise ValueError("quantize_every must be 'batch' or 'epoch'")


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    conv_inputs: list  # input of each conv layer
    conv_z: list  # pre-activation conv outputs
    pool_idx: list
    activations: list  # a^(k) for dense layers, a^(0) = flattened features
    dense_z: list
    probs: np.ndarray
    weights: list  # identities of the weight arrays used, for staleness checks


def init_weights(spec: NetworkSpec, cfg: TrainConfig) -> Params:
    """Uniform ``init_scale * U(-1, 1)`` weights plus ``init_perturbation``; zero biases."""
    rng = make_rng(cfg.seed, _INIT_STREAM)
    weights, biases = [], []
    delta = F32(cfg.init_perturbation)
    for wshape, bshape in spec.param_shapes():
        w = (F32(cfg.init_scale) * rng.uniform(-1.0, 1.0, wshape).astype(F32)).astype(F32)
        weights.append((w + delta).astype(F32))
        biases.append(np.zeros(bshape, dtype=F32))
    return Params(weights, biases)


def _as_batch(x, spec: NetworkSpec):
    x = np.asarray(x, dtype=F32)
    h, w, c = spec.input_shape
    if x.ndim == 3 and c == 1:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ShapeError(f"input batch {x.shape} does not match network input {(c, h, w)}")
    return x


def forward(params: Params, x, ctx: ArithContext, spec: NetworkSpec):
    """Class probabilities for a batch plus the trace needed by :func:`backward`."""
    x = _as_batch(x, spec)
    n_conv = len(spec.conv_layers)
    trace = ForwardTrace(x, [], [], [], [], [], None, list(params.weights))
    a = x
    for k in range(n_conv):
        trace.conv_inputs.append(a)
        z = T.conv2d_valid(a, params.weights[k], ctx)
        z = ctx.q_layer(T.add_bias(z, params.biases[k], ctx))
        trace.conv_z.append(z)
        a, idx = T.maxpool2(T.relu(z))
        trace.pool_idx.append(idx)
    a = a.reshape(len(x), -1)
    trace.activations.append(a)
    for k in range(n_conv, len(params.weights)):
        z = T.matmul(a, params.weights[k].T, ctx)
        z = ctx.q_layer(T.add_bias(z, params.biases[k], ctx))
        trace.dense_z.append(z)
        if k < len(params.weights) - 1:
            a = T.relu(z)
            trace.activations.append(a)
    trace.probs = ctx.q_layer(T.softmax_rows(z, ctx))
    return trace.probs, trace


def logits(trace: ForwardTrace) -> np.ndarray:
    return trace.dense_z[-1]


def cross_entropy(trace: ForwardTrace, targets) -> float:
    """Mean cross-entropy from the logits, evaluated in float64."""
    z = logits(trace).astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - (z * targets).sum(axis=1)))


def backward(params: Params, trace: ForwardTrace, targets, ctx: ArithContext, spec: NetworkSpec) -> Grads:
    """Gradients of the mean cross-entropy for every weight and bias.

    Dense recursion: ``db = g``, ``dW = g a_prev^T`` (summed over the batch),
    ``g <- W^T g`` then masked by the ReLU derivative.
    """
    if len(trace.weights) != len(params.weights) or any(
        a is not b for a, b in zip(trace.weights, params.weights)
    ):
        raise StaleTraceError("trace was produced with different parameters")
    targets = np.asarray(targets, dtype=F32)
    if targets.shape != trace.probs.shape:
        raise ShapeError(f"targets {targets.shape} do not match outputs {trace.probs.shape}")
    n_conv = len(spec.conv_layers)
    n = len(params.weights)
    dW: list = [None] * n
    db: list = [None] * n
    batch = F32(len(targets))
    g = ctx.q_layer(ctx.div(T.sub(trace.probs, targets, ctx), batch))

    for k in range(n - 1, n_conv - 1, -1):
        a_prev = trace.activations[k - n_conv]
        dW[k] = ctx.q_layer(T.matmul(g.T, a_prev, ctx))
        db[k] = ctx.q_layer(T.sum_axis0(g, ctx))
        g = ctx.q_layer(T.matmul(g, params.weights[k], ctx))
        if k > n_conv:
            g = T.relu_backward(g, trace.dense_z[k - n_conv - 1])

    c, h, w = spec.feature_shapes()[-1]
    g = g.reshape(len(targets), c, h, w)
    for k in range(n_conv - 1, -1, -1):
        z = trace.conv_z[k]
        g = T.maxpool2_backward(g, trace.pool_idx[k], z.shape)
        g = T.relu_backward(g, z)
        dx, dW[k] = T.conv2d_backward(trace.conv_inputs[k], params.weights[k], g, ctx, need_dx=k > 0)
        dW[k] = ctx.q_layer(dW[k])
        db[k] = ctx.q_layer(T.sum_axis0(g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1]), ctx))
        if k > 0:
            g = ctx.q_layer(dx)
    return Params(dW, db)


def sigmoid_squared_error_delta(y0, y):
    """Output-layer delta ``(y0 - y) * (y - y^2)`` for a sigmoid head with squared loss.

    The sign follows the descent-direction convention ``g = y0 - y``. Only used
    by the error analysis; training uses the softmax/cross-entropy head.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (y0 - y) * (y - y * y)


@dataclass
class RMSpropState:
    cache: Params


def rmsprop_init(params: Params) -> RMSpropState:
    return RMSpropState(params.map(np.zeros_like))


def rmsprop_step(params: Params, grads: Grads, state: RMSpropState, cfg: TrainConfig,
                 ctx: ArithContext | None = None, epoch: int = 0):
    """One RMSprop update; returns new ``(params, state)`` without mutating inputs."""
    ctx = ctx or T.FULL
    if not grads.check_finite():
        raise DivergenceError(epoch)
    decay, keep = F32(cfg.rmsprop_decay), F32(1.0 - cfg.rmsprop_decay)
    lr, eps = F32(cfg.learning_rate), F32(cfg.rmsprop_epsilon)
    new_p, new_c = [], []
    for p, g, c in zip(params.arrays(), grads.arrays(), state.cache.arrays()):
        if p.shape != g.shape or p.shape != c.shape:
            raise ShapeError(f"rmsprop: param {p.shape}, grad {g.shape}, cache {c.shape}")
        c2 = ctx.add(ctx.mul(decay, c), ctx.mul(keep, ctx.mul(g, g)))
        step = ctx.div(ctx.mul(lr, g), ctx.add(ctx.sqrt(c2), eps))
        new_p.append(ctx.sub(p, step))
        new_c.append(c2)
    k = len(params.weights)
    return Params(new_p[:k], new_p[k:]), RMSpropState(Params(new_c[:k], new_c[k:]))


def evaluate(params: Params, dataset: Dataset, spec: NetworkSpec, chunk: int = 1000) -> float:
    """Fraction of argmax-correct predictions from a full-precision forward pass.

    Ties go to the lowest class index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), chunk):
        probs, _ = forward(params, dataset.images[start : start + chunk], T.FULL, spec)
        correct += int(np.sum(probs.argmax(axis=1) == dataset.labels[start : start + chunk]))
    return correct / len(dataset)


@dataclass
class RunRecord:
    config: dict
    accuracies: list = field(default_factory=list)
    status: str = "completed"
    wall_time: float = 0.0
    diverged_epoch: int | None = None

    def epochs_to(self, threshold: float):
        return epochs_to_threshold(self.accuracies, threshold)


def epochs_to_threshold(accuracies, threshold: float):
    """1-based index of the first epoch with accuracy >= threshold, else None."""
    for i, acc in enumerate(accuracies, start=1):
        if acc >= threshold:
            return i
    return None


def config_snapshot(spec: NetworkSpec, cfg: TrainConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if hasattr(v, "value"):
            return v.value
        return v

    snap = {"network": plain(dataclasses.asdict(spec)), "train": plain(dataclasses.asdict(cfg))}
    return snap


def train(spec: NetworkSpec, cfg: TrainConfig, train_set: Dataset, test_set: Dataset,
          on_epoch=None) -> RunRecord:
    """Mini-batch RMSprop training; test accuracy recorded after every epoch.

    A non-finite loss or gradient stops the run and marks it diverged; the
    accuracies collected so far are kept.
    """
    started = time.perf_counter()
    prec = cfg.precision
    ctx = ArithContext(prec, make_rng(cfg.seed, _ROUNDING_STREAM))
    quantize_params = prec.granularity in (Granularity.PER_BATCH, Granularity.PER_LAYER)
    params = init_weights(spec, cfg)
    if prec.granularity is not Granularity.NONE:
        params = params.map(ctx.q_params)
    state = rmsprop_init(params)
    record = RunRecord(config_snapshot(spec, cfg))
    # overflow is expected on the way to divergence and is reported through DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        _train_epochs(spec, cfg, train_set, test_set, ctx, params, state, record, quantize_params, on_epoch)
    record.wall_time = time.perf_counter() - started
    return record


def _train_epochs(spec, cfg, train_set, test_set, ctx, params, state, record, quantize_params, on_epoch):
    try:
        for epoch in range(cfg.epochs):
            for x, t in batches(train_set, cfg.batch_size, cfg.seed, epoch, spec.classes):
                _, trace = forward(params, x, ctx, spec)
                loss = cross_entropy(trace, t)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch + 1, "non-finite loss")
                grads = backward(params, trace, t, ctx, spec)
                params, state = rmsprop_step(params, grads, state, cfg, ctx, epoch + 1)
                if quantize_params and cfg.quantize_every == "batch":
                    params = params.map(ctx.q_params)
            if quantize_params and cfg.quantize_every == "epoch":
                params = params.map(ctx.q_params)
            if not params.check_finite():
                raise DivergenceError(epoch + 1, "non-finite parameters")
            acc = evaluate(params, test_set, spec)
            record.accuracies.append(acc)
            log.info("epoch %d accuracy %.4f", epoch + 1, acc)
            if on_epoch is not None:
                on_epoch(epoch + 1, acc, params)
    except DivergenceError as exc:
        log.warning("run diverged: %s", exc)
        record.status = "diverged"
        record.diverged_epoch = exc.epoch
