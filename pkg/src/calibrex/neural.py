"""Small feed-forward networks written directly in numpy.

Three uses share the same machinery:

* a reducer (encoder d -> r, decoder r -> d, loss head r -> 1) trained on
  the combined loss-prediction + reconstruction + bound-penalty objective,
* an MLP prior mean for the GP,
* plain regression via :func:`sgd_step`.

Hidden and bottleneck layers use the bounded ReLU ``min(cap, max(0, x))`` so
the latent code of a reducer lives in ``[0, cap]^r``; output layers are
linear.  Training is plain mini-batch SGD with backpropagation.
"""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np

from calibrex.errors import InvalidArgumentError, TrainingError
from calibrex.sampling import BoxDomain

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BRELU = "bounded-relu"
IDENTITY = "identity"


@dataclasses.dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = IDENTITY
    cap: float = 1.0

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=float))
        self.bias = np.asarray(self.bias, dtype=float).ravel()
        if self.bias.shape[0] != self.weight.shape[0]:
            raise InvalidArgumentError("bias length must match the weight's output size")
        if self.activation not in (BRELU, IDENTITY):
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.activation == BRELU and not self.cap > 0:
            raise InvalidArgumentError("bounded-relu cap must be > 0")


@dataclasses.dataclass
class NeuralNet:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise InvalidArgumentError(
                    f"layer sizes do not chain: {a.weight.shape} then {b.weight.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self) -> "NeuralNet":
        return NeuralNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.cap) for l in self.layers]
        )

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layers": [
                {
                    "shape": list(l.weight.shape),
                    "weight": l.weight.ravel(order="C").tolist(),
                    "bias": l.bias.tolist(),
                    "activation": l.activation,
                    "cap": l.cap,
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeuralNet":
        if d.get("format_version") != FORMAT_VERSION:
            raise InvalidArgumentError(
                f"unsupported network format version {d.get('format_version')!r}"
            )
        layers = []
        for spec in d["layers"]:
            w = np.array(spec["weight"], dtype=float).reshape(spec["shape"], order="C")
            layers.append(Layer(w, spec["bias"], spec["activation"], spec["cap"]))
        return cls(layers)


def bounded_relu(x, cap: float):
    return np.minimum(cap, np.maximum(0.0, x))


def _activate(layer: Layer, z):
    return bounded_relu(z, layer.cap) if layer.activation == BRELU else z


def init_net(sizes, activations, rng: np.random.Generator, cap: float = 1.0) -> NeuralNet:
    """He-style uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``.

    Bounded-ReLU layers start with bias ``cap / 2`` so units begin inside the
    linear part of the activation rather than dead at zero.
    """
    if len(activations) != len(sizes) - 1:
        raise InvalidArgumentError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.full(fan_out, 0.5 * cap if act == BRELU else 0.0)
        layers.append(Layer(w, b, act, cap))
    return NeuralNet(layers)


def mlp(input_dim: int, hidden: int, output_dim: int, rng, cap: float = 1.0,
        bottleneck: bool = False) -> NeuralNet:
    """One hidden bounded-ReLU layer; a bottleneck also bounds the output layer."""
    out_act = BRELU if bottleneck else IDENTITY
    return init_net([input_dim, hidden, output_dim], [BRELU, out_act], rng, cap)


def forward(net: NeuralNet, x) -> np.ndarray:
    """Apply the network to one vector or to the rows of a matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    for layer in net.layers:
        a = _activate(layer, a @ layer.weight.T + layer.bias)
    return a[0] if single else a


def _forward_cache(net: NeuralNet, X: np.ndarray):
    pre, post = [], [X]
    a = X
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        a = _activate(layer, z)
        pre.append(z)
        post.append(a)
    return pre, post


def _backward(net: NeuralNet, cache, grad_out: np.ndarray):
    """Gradients of a scalar loss given ``dLoss/dOutput``.

    Returns ``(param_grads, grad_input)`` with ``param_grads`` a list of
    ``(dW, db)`` per layer.
    """
    pre, post = cache
    grads = [None] * len(net.layers)
    g = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == BRELU:
            z = pre[i]
            g = g * ((z > 0.0) & (z < layer.cap))
        grads[i] = (g.T @ post[i], g.sum(axis=0))
        g = g @ layer.weight
    return grads, g


def _apply(net: NeuralNet, grads, lr: float) -> NeuralNet:
    return NeuralNet(
        [
            Layer(l.weight - lr * dw, l.bias - lr * db, l.activation, l.cap)
            for l, (dw, db) in zip(net.layers, grads)
        ]
    )


def mse_and_gradients(net: NeuralNet, X, Y):
    """Mean squared error over all output entries, and its parameter gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    cache = _forward_cache(net, X)
    diff = cache[1][-1] - Y
    loss = float(np.mean(diff * diff))
    grads, _ = _backward(net, cache, 2.0 * diff / diff.size)
    return loss, grads


def sgd_step(net: NeuralNet, batch, learning_rate: float) -> NeuralNet:
    """One backpropagation update on the MSE of ``batch = (X, Y)``; returns a new net."""
    X, Y = batch
    _, grads = mse_and_gradients(net, X, Y)
    return _apply(net, grads, learning_rate)


def bound_penalty(x_pred, box: BoxDomain):
    """Quadratic hinge ``max(0, x - ub)^2 + max(0, lb - x)^2`` summed over coordinates.

    A matrix input gives one penalty per row.
    """
    x = np.asarray(x_pred, dtype=float)
    over = np.maximum(0.0, x - box.upper)
    under = np.maximum(0.0, box.lower - x)
    return np.sum(over * over + under * under, axis=-1)


def _bound_penalty_grad(x, box: BoxDomain):
    return 2.0 * np.maximum(0.0, x - box.upper) - 2.0 * np.maximum(0.0, box.lower - x)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-2
    lr_decay: float = 0.999
    batch_size: int = 16
    hidden: int = 16
    cap: float = 1.0
    penalty_weight: float = 10.0
    tune_epochs: int = 100
    latent_penalty_samples: int = 16

    def __post_init__(self):
        if self.epochs < 0 or self.tune_epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if self.batch_size < 1 or self.hidden < 1:
            raise InvalidArgumentError("batch_size and hidden must be >= 1")
        if self.learning_rate < 0 or not 0 < self.lr_decay <= 1:
            raise InvalidArgumentError("bad learning-rate schedule")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise InvalidArgumentError(f"unknown neural config keys {sorted(unknown)}")
        return cls(**d)


def _standardizer(y: np.ndarray):
    shift = float(np.mean(y))
    scale = float(np.std(y))
    if not scale > 1e-12:
        scale = 1.0
    return shift, scale


def _minibatches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclasses.dataclass
class ReducerNet:
    """Encoder/decoder/head trio; the head predicts standardised loss."""

    encoder: NeuralNet
    decoder: NeuralNet
    head: NeuralNet
    y_shift: float = 0.0
    y_scale: float = 1.0
    history: list = dataclasses.field(default_factory=list, compare=False)

    def __post_init__(self):
        r = self.encoder.output_dim
        if not r < self.encoder.input_dim:
            raise InvalidArgumentError("bottleneck dimension must be smaller than the input")
        if self.decoder.input_dim != r or self.head.input_dim != r:
            raise InvalidArgumentError("decoder and head must read the bottleneck")
        if self.decoder.output_dim != self.encoder.input_dim or self.head.output_dim != 1:
            raise InvalidArgumentError("decoder must reconstruct the input; head is scalar")

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim

    @property
    def cap(self) -> float:
        return self.encoder.layers[-1].cap

    @property
    def latent_bounds(self) -> BoxDomain:
        return BoxDomain.cube(self.latent_dim, 0.0, self.cap)

    def encode(self, X) -> np.ndarray:
        return forward(self.encoder, X)

    def decode(self, V) -> np.ndarray:
        return forward(self.decoder, V)

    def predict_loss(self, X) -> np.ndarray:
        h = self.encode(np.atleast_2d(X))
        return self.y_shift + self.y_scale * forward(self.head, h)[:, 0]

    def copy(self) -> "ReducerNet":
        return ReducerNet(
            self.encoder.copy(), self.decoder.copy(), self.head.copy(),
            self.y_shift, self.y_scale, list(self.history),
        )

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "head": self.head.to_dict(),
            "y_shift": self.y_shift,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReducerNet":
        return cls(
            NeuralNet.from_dict(d["encoder"]),
            NeuralNet.from_dict(d["decoder"]),
            NeuralNet.from_dict(d["head"]),
            float(d["y_shift"]),
            float(d["y_scale"]),
        )


def init_reducer(d: int, r: int, config: TrainConfig, rng) -> ReducerNet:
    if not 1 <= r < d:
        raise InvalidArgumentError(f"latent dimension must satisfy 1 <= r < d = {d}, got {r}")
    h, cap = config.hidden, config.cap
    encoder = init_net([d, h, r], [BRELU, BRELU], rng, cap)
    decoder = init_net([r, h, d], [BRELU, IDENTITY], rng, cap)
    head = init_net([r, h, 1], [BRELU, IDENTITY], rng, cap)
    return ReducerNet(encoder, decoder, head)


def _reducer_objective(red: ReducerNet, X, ys, box: BoxDomain, penalty_weight: float,
                       V_extra=None):
    """Combined loss and gradients for the encoder, decoder and head.

    ``V_extra`` are latent points whose decodings only contribute to the
    bound penalty (they keep the decoder inside the box over the whole
    latent search region, not just at the training codes).
    """
    B, d = X.shape
    enc_cache = _forward_cache(red.encoder, X)
    codes = enc_cache[1][-1]
    head_cache = _forward_cache(red.head, codes)
    dec_cache = _forward_cache(red.decoder, codes)
    yhat = head_cache[1][-1][:, 0]
    xhat = dec_cache[1][-1]

    y_err = yhat - ys
    x_err = xhat - X
    pen = bound_penalty(xhat, box)
    loss = float(np.mean(y_err * y_err) + np.mean(x_err * x_err) + penalty_weight * np.mean(pen))

    g_head, g_codes_h = _backward(red.head, head_cache, (2.0 * y_err / B)[:, None])
    g_xhat = 2.0 * x_err / (B * d) + penalty_weight * _bound_penalty_grad(xhat, box) / B
    g_dec, g_codes_d = _backward(red.decoder, dec_cache, g_xhat)
    g_enc, _ = _backward(red.encoder, enc_cache, g_codes_h + g_codes_d)

    if V_extra is not None and len(V_extra):
        extra_cache = _forward_cache(red.decoder, V_extra)
        out = extra_cache[1][-1]
        loss += float(penalty_weight * np.mean(bound_penalty(out, box)))
        g_extra, _ = _backward(
            red.decoder, extra_cache,
            penalty_weight * _bound_penalty_grad(out, box) / V_extra.shape[0],
        )
        g_dec = [(a + c, b + e) for (a, b), (c, e) in zip(g_dec, g_extra)]
    return loss, g_enc, g_dec, g_head


def reducer_loss(red: ReducerNet, X, y, box: BoxDomain | None = None,
                 penalty_weight: float = 10.0) -> float:
    """Combined objective on raw losses ``y`` (standardised with the net's own scaling)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    box = box or BoxDomain.cube(X.shape[1])
    ys = (np.asarray(y, dtype=float) - red.y_shift) / red.y_scale
    return _reducer_objective(red, X, ys, box, penalty_weight)[0]


def train_reducer(X, y, r: int, config: TrainConfig, rng: np.random.Generator,
                  init: ReducerNet | None = None, epochs: int | None = None,
                  box: BoxDomain | None = None) -> ReducerNet:
    """Train a reducer on normalised inputs ``X`` and their losses ``y``.

    ``init`` warm-starts from an existing reducer (keeping its loss
    scaling); otherwise a fresh one is drawn from ``rng``.  ``history`` on
    the result holds the mean combined loss of every epoch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if n < 10:
        raise InvalidArgumentError(f"reducer training needs at least 10 samples, got {n}")
    if y.shape[0] != n:
        raise InvalidArgumentError("one loss per input row required")
    box = box or BoxDomain.cube(d)
    epochs = config.epochs if epochs is None else epochs

    if init is None:
        red = init_reducer(d, r, config, rng)
        red.y_shift, red.y_scale = _standardizer(y)
    else:
        if init.latent_dim != r or init.input_dim != d:
            raise InvalidArgumentError("warm-start reducer has the wrong shape")
        red = init.copy()
    ys = (y - red.y_shift) / red.y_scale

    history = list(red.history)
    lr = config.learning_rate
    for epoch in range(epochs):
        rate = lr * config.lr_decay ** epoch
        total, count = 0.0, 0
        for idx in _minibatches(n, config.batch_size, rng):
            extra = None
            if config.latent_penalty_samples:
                extra = rng.uniform(0.0, red.cap, size=(config.latent_penalty_samples, r))
            loss, g_enc, g_dec, g_head = _reducer_objective(
                red, X[idx], ys[idx], box, config.penalty_weight, extra
            )
            if not math.isfinite(loss):
                raise TrainingError(f"reducer training diverged at epoch {epoch}", epoch=epoch)
            red = ReducerNet(
                _apply(red.encoder, g_enc, rate),
                _apply(red.decoder, g_dec, rate),
                _apply(red.head, g_head, rate),
                red.y_shift,
                red.y_scale,
            )
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
    red.history = history
    return red


class NeuralMean:
    """An MLP prior mean ``x -> shift + scale * net(x)`` usable as ``GpModel.mean_fn``."""

    def __init__(self, net: NeuralNet, shift: float = 0.0, scale: float = 1.0):
        self.net = net
        self.shift = float(shift)
        self.scale = float(scale)
        self.history = []

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.shift + self.scale * forward(self.net, X)[:, 0]

    def __repr__(self):
        return f"NeuralMean(input_dim={self.net.input_dim})"

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "shift": self.shift, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NeuralMean":
        return cls(NeuralNet.from_dict(d["net"]), d["shift"], d["scale"])


def train_mean(X, y, config: TrainConfig, rng: np.random.Generator,
               init: NeuralMean | None = None, epochs: int | None = None) -> NeuralMean:
    """Fit an MLP mean function to ``(X, y)`` by mini-batch SGD on standardised targets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise InvalidArgumentError("one loss per input row required")
    if X.shape[0] < 1:
        raise InvalidArgumentError("mean training needs data")
    epochs = config.epochs if epochs is None else epochs
    if init is None:
        net = mlp(X.shape[1], config.hidden, 1, rng, config.cap)
        # Zero output layer: the untrained mean is exactly the data average.
        net.layers[-1].weight[:] = 0.0
        shift, scale = _standardizer(y)
        history = []
    else:
        net, shift, scale, history = init.net.copy(), init.shift, init.scale, list(init.history)
    ys = ((y - shift) / scale)[:, None]
    for epoch in range(epochs):
        rate = config.learning_rate * config.lr_decay ** epoch
        total = 0.0
        for idx in _minibatches(X.shape[0], config.batch_size, rng):
            loss, grads = mse_and_gradients(net, X[idx], ys[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"mean training diverged at epoch {epoch}", epoch=epoch)
            net = _apply(net, grads, rate)
            total += loss * len(idx)
        history.append(total / X.shape[0])
    out = NeuralMean(net, shift, scale)
    out.history = history
    return out
