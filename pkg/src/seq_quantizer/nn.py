"""Sequential float64 network engine: layers, losses, backprop, SGD, encoder pretraining.

Layers are stateless with respect to activations: ``forward`` returns the full
activation list and ``backward`` consumes it, so one forward pass can feed
several backward passes and nothing is cached on the layer objects.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import LabeledDataset, batches
from .errors import NumericError, PreconditionError, ShapeError

log = logging.getLogger(__name__)

EPS = 1e-12
EMBED_DIM = 128
NUM_CLASSES = 10
ARCHS = ("LAE-2", "LAE-4", "CAE-4")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.frozen = False

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init(self, rng, scheme="he"):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, y, grad_y):
        """Return ``(grad_x, {param_name: grad})``."""
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def _normal_init(rng, shape, fan_in, fan_out, scheme):
    if scheme == "he":
        std = np.sqrt(2.0 / fan_in)
    elif scheme == "xavier":
        std = np.sqrt(2.0 / (fan_in + fan_out))
    else:
        raise ValueError(f"unknown weight init {scheme!r}")
    return rng.normal(0.0, std, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.params = {"W": np.zeros((self.in_dim, self.out_dim)), "b": np.zeros(self.out_dim)}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"expects ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def init(self, rng, scheme="he"):
        self.params["W"] = _normal_init(rng, (self.in_dim, self.out_dim), self.in_dim, self.out_dim, scheme)
        self.params["b"] = np.zeros(self.out_dim)

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"]

    def backward(self, x, y, grad_y):
        grads = {"W": x.T @ grad_y, "b": grad_y.sum(axis=0)}
        return grad_y @ self.params["W"].T, grads

    def spec(self):
        return {"kind": self.kind, "in": self.in_dim, "out": self.out_dim}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, y, grad_y):
        return grad_y * (x > 0), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        # tanh form never overflows
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(self, x, y, grad_y):
        return grad_y * y * (1.0 - y), {}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, x, y, grad_y):
        return y * (grad_y - (grad_y * y).sum(axis=1, keepdims=True)), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(len(x), -1)

    def backward(self, x, y, grad_y):
        return grad_y.reshape(x.shape), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(in_shape)} to {self.shape}")
        return self.shape

    def forward(self, x):
        return x.reshape((len(x),) + self.shape)

    def backward(self, x, y, grad_y):
        return grad_y.reshape(x.shape), {}

    def spec(self):
        return {"kind": self.kind, "shape": list(self.shape)}


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"expects (C, even H, even W), got {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    @staticmethod
    def _windows(x):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)

    def forward(self, x):
        return self._windows(x).max(axis=-1)

    def backward(self, x, y, grad_y):
        n, c, h, w = x.shape
        winner = self._windows(x).argmax(axis=-1)
        scattered = (np.arange(4) == winner[..., None]) * grad_y[..., None]
        grad_x = scattered.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return grad_x, {}


class Conv2d(Layer):
    """Stride-1 convolution with same padding; weights shaped (out, in, k, k)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 5):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        self.in_channels, self.out_channels, self.kernel = int(in_channels), int(out_channels), int(kernel)
        k = self.kernel
        self.params = {"W": np.zeros((self.out_channels, self.in_channels, k, k)), "b": np.zeros(self.out_channels)}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        return (self.out_channels,) + tuple(in_shape[1:])

    def init(self, rng, scheme="he"):
        k = self.kernel
        fan_in, fan_out = self.in_channels * k * k, self.out_channels * k * k
        self.params["W"] = _normal_init(rng, self.params["W"].shape, fan_in, fan_out, scheme)
        self.params["b"] = np.zeros(self.out_channels)

    def _cols(self, x):
        """im2col in channel-major order: (c*k*k, n*h*w)."""
        n, c, h, w = x.shape
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))  # n,c,h,w,k,k
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * self.kernel**2, n * h * w)

    def forward(self, x):
        n, _, h, w = x.shape
        out = self.params["W"].reshape(self.out_channels, -1) @ self._cols(x) + self.params["b"][:, None]
        return out.reshape(self.out_channels, n, h, w).transpose(1, 0, 2, 3)

    def backward(self, x, y, grad_y):
        n, c, h, w = x.shape
        k, p = self.kernel, self.kernel // 2
        g = grad_y.transpose(1, 0, 2, 3).reshape(self.out_channels, n * h * w)
        w_mat = self.params["W"].reshape(self.out_channels, -1)
        grads = {"W": (g @ self._cols(x).T).reshape(self.params["W"].shape), "b": g.sum(axis=1)}
        dcols = (w_mat.T @ g).reshape(c, k, k, n, h, w)
        dxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky:ky + h, kx:kx + w] += dcols[:, ky, kx]
        return dxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3), grads

    def spec(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels, "kernel": self.kernel}


class ConvTranspose2d(Layer):
    """Stride-2 transposed convolution doubling H and W; weights shaped (in, out, k, k).

    Equivalent to the input-gradient of a stride-2 ``k // 2``-padded convolution
    with one row/column of output padding.
    """

    kind = "convtranspose2d"
    stride = 2

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 5):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel = int(in_channels), int(out_channels), int(kernel)
        k = self.kernel
        self.params = {"W": np.zeros((self.in_channels, self.out_channels, k, k)), "b": np.zeros(self.out_channels)}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        return (self.out_channels, 2 * in_shape[1], 2 * in_shape[2])

    def init(self, rng, scheme="he"):
        k = self.kernel
        fan_in = self.in_channels * k * k / self.stride**2
        fan_out = self.out_channels * k * k / self.stride**2
        self.params["W"] = _normal_init(rng, self.params["W"].shape, fan_in, fan_out, scheme)
        self.params["b"] = np.zeros(self.out_channels)

    def forward(self, x):
        n, c, h, w = x.shape
        k, p, s = self.kernel, self.kernel // 2, self.stride
        co = self.out_channels
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * w, c) @ self.params["W"].reshape(c, -1)
        cols = cols.reshape(n, h, w, co, k, k).transpose(0, 3, 1, 2, 4, 5)  # n,co,h,w,k,k
        full = np.zeros((n, co, s * h + 2 * p, s * w + 2 * p))
        for ky in range(k):
            for kx in range(k):
                full[:, :, ky:ky + s * h:s, kx:kx + s * w:s] += cols[..., ky, kx]
        return full[:, :, p:p + s * h, p:p + s * w] + self.params["b"][:, None, None]

    def backward(self, x, y, grad_y):
        n, c, h, w = x.shape
        k, p, s = self.kernel, self.kernel // 2, self.stride
        co = self.out_channels
        full = np.zeros((n, co, s * h + 2 * p, s * w + 2 * p))
        full[:, :, p:p + s * h, p:p + s * w] = grad_y
        dcols = np.empty((n, h, w, co, k, k))
        for ky in range(k):
            for kx in range(k):
                dcols[..., ky, kx] = full[:, :, ky:ky + s * h:s, kx:kx + s * w:s].transpose(0, 2, 3, 1)
        dcols = dcols.reshape(n * h * w, co * k * k)
        x_mat = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        w_mat = self.params["W"].reshape(c, -1)
        grads = {"W": (x_mat.T @ dcols).reshape(self.params["W"].shape), "b": grad_y.sum(axis=(0, 2, 3))}
        grad_x = (dcols @ w_mat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return grad_x, grads

    def spec(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels, "kernel": self.kernel}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Dense, ReLU, Sigmoid, Softmax, Flatten, Reshape, MaxPool2x2, Conv2d, ConvTranspose2d)
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind in ("dense", "conv2d", "convtranspose2d"):
        args = [spec["in"], spec["out"]] + ([spec["kernel"]] if "kernel" in spec else [])
        return LAYER_KINDS[kind](*args)
    if kind == "reshape":
        return Reshape(spec["shape"])
    return LAYER_KINDS[kind]()


class Network:
    """Ordered layers over a fixed per-sample input shape.

    Shapes are checked layer by layer at construction, so a mis-wired network
    fails before any data flows through it.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}): {exc}") from None

    @property
    def output_shape(self):
        return self.shapes[-1]

    def init(self, rng, scheme="he"):
        for layer in self.layers:
            layer.init(rng, scheme)
        return self

    def freeze(self, frozen=True):
        for layer in self.layers:
            layer.frozen = frozen
        return self

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield (i, name), value

    def param_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v).tobytes() for _, v in self.named_params())

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def __call__(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def predict(self, x, chunk=1000):
        """Output of the last layer, evaluated in chunks to bound memory."""
        if len(x) == 0:
            return np.zeros((0,) + self.output_shape)
        return np.concatenate([self(x[i:i + chunk]) for i in range(0, len(x), chunk)])

    def __repr__(self):
        return f"Network({self.input_shape} -> {self.output_shape}, {len(self.layers)} layers)"


def forward(net: Network, batch) -> list:
    """Return ``[input, out_1, ..., out_L]``."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0 ({net.layers[0]!r}) expects samples of shape {net.input_shape}, got {batch.shape[1:]}")
    acts = [batch]
    for layer in net.layers:
        acts.append(layer.forward(acts[-1]))
    return acts


def backward(net: Network, loss_grad, activations) -> dict:
    """Backpropagate ``loss_grad`` (gradient w.r.t. the network output).

    Returns ``{(layer_index, param_name): grad}`` for non-frozen parameters
    only. Propagation stops below the lowest trainable layer.
    """
    if len(activations) != len(net.layers) + 1:
        raise ShapeError(f"got {len(activations)} activations for {len(net.layers)} layers")
    n = len(activations[0])
    for i, (a, shape) in enumerate(zip(activations, net.shapes)):
        if a.shape != (n,) + shape:
            raise ShapeError(f"activation {i} has shape {a.shape}, network expects {(n,) + shape}; stale activations?")
    grad = np.asarray(loss_grad, dtype=np.float64)
    if grad.shape != activations[-1].shape:
        raise ShapeError(f"loss gradient shape {grad.shape} != output shape {activations[-1].shape}")
    trainable = [i for i, layer in enumerate(net.layers) if not layer.frozen and layer.params]
    if not trainable:
        return {}
    grads = {}
    for i in range(len(net.layers) - 1, min(trainable) - 1, -1):
        layer = net.layers[i]
        grad, pgrads = layer.backward(activations[i], activations[i + 1], grad)
        if not layer.frozen:
            for name, g in pgrads.items():
                grads[(i, name)] = g
    return grads


def sgd_step(net: Network, gradients: dict, learning_rate: float) -> Network:
    """In-place ``param -= lr * grad`` for every non-frozen parameter."""
    for key, g in gradients.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for layer {key[0]} param {key[1]}; step aborted")
    for (i, name), g in gradients.items():
        layer = net.layers[i]
        if layer.frozen:
            continue
        if g.shape != layer.params[name].shape:
            raise ShapeError(f"gradient for layer {i} {name} has shape {g.shape}, param has {layer.params[name].shape}")
        layer.params[name] -= learning_rate * g
    return net


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood of the true labels, floored at log(1e-12)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, EPS))))


def softmax_cross_entropy(logits, labels):
    """Fused softmax + cross-entropy in the log domain; returns ``(loss, dloss/dlogits)``."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def mse(x, x_hat) -> float:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


# ---------------------------------------------------------------- architectures


def input_shape(arch: str) -> tuple:
    _check_arch(arch)
    return (1, 28, 28) if arch == "CAE-4" else (784,)


def layout(arch: str) -> str:
    return "chw" if input_shape(arch) == (1, 28, 28) else "flat"


def _check_arch(arch):
    if arch not in ARCHS:
        raise PreconditionError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def _dense_stack(dims):
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [Dense(a, b), ReLU()]
    return layers


def encoder_layers(arch: str) -> list[Layer]:
    """Encoder body ending in the ReLU'd dense(128) embedding."""
    _check_arch(arch)
    if arch == "LAE-2":
        return _dense_stack([784, 1024, 128])
    if arch == "LAE-4":
        return _dense_stack([784, 1024, 512, 256, 128])
    return [
        Conv2d(1, 32, 5), ReLU(), MaxPool2x2(),
        Conv2d(32, 64, 5), ReLU(), MaxPool2x2(),
        Flatten(),
    ] + _dense_stack([64 * 7 * 7, 1024, 128])


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    weight_init: str = "he"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.weight_init not in ("he", "xavier"):
            raise ValueError(f"unknown weight_init {self.weight_init!r}")


def default_train_config(arch: str, **overrides) -> TrainConfig:
    _check_arch(arch)
    base = {"epochs": 10 if arch == "CAE-4" else 20}
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EncoderModel:
    arch: str
    net: Network
    trained: bool = False
    history: list = field(default_factory=list)
    p_e: float | None = None

    @classmethod
    def build(cls, arch: str) -> "EncoderModel":
        return cls(arch, Network(encoder_layers(arch), input_shape(arch)))


@dataclass
class FeatureSet:
    matrix: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or len(self.matrix) < 1:
            raise ShapeError(f"feature matrix must be N x d with N >= 1, got {self.matrix.shape}")
        if np.isnan(self.matrix).any():
            raise ValueError("feature matrix contains NaN")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.matrix):
                raise ShapeError(f"{len(self.labels)} labels for {len(self.matrix)} features")

    def __len__(self):
        return len(self.matrix)


def accuracy(net: Network, ds: LabeledDataset, chunk=1000) -> float:
    pred = net.predict(ds.features, chunk).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


def train_encoder(train: LabeledDataset, arch: str, cfg: TrainConfig, test: LabeledDataset | None = None):
    """Pretrain an encoder through a temporary dense(128->10)+softmax head.

    Returns ``(encoder, P_E)`` with the head removed. P_E is the head's
    accuracy on ``test`` (on ``train`` if no test split is given).
    """
    if len(train) == 0:
        raise PreconditionError("empty training set")
    if train.labels.min() < 0 or train.labels.max() >= NUM_CLASSES:
        raise PreconditionError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    enc = EncoderModel.build(arch)
    if train.features.shape[1:] != enc.net.input_shape:
        raise ShapeError(f"{arch} expects samples of shape {enc.net.input_shape}, got {train.features.shape[1:]}")
    classifier = Network(enc.net.layers + [Dense(EMBED_DIM, NUM_CLASSES), Softmax()], enc.net.input_shape)
    classifier.init(np.random.default_rng(cfg.seed), cfg.weight_init)
    # the softmax is folded into the loss; backprop starts at the logits
    logits_net = Network(classifier.layers[:-1], classifier.input_shape)

    checkpoint = None
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for x, y in batches(train, cfg.batch_size, cfg.seed, epoch):
            acts = forward(logits_net, x)
            loss, dlogits = softmax_cross_entropy(acts[-1], y)
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}", checkpoint=checkpoint)
            sgd_step(logits_net, backward(logits_net, dlogits, acts), cfg.learning_rate)
            total += loss * len(y)
            count += len(y)
        checkpoint = {"epoch": epoch, "params": [copy.deepcopy(l.params) for l in classifier.layers]}
        enc.history.append({"epoch": epoch, "train_loss": total / count})
        log.info("%s epoch %d loss %.5f", arch, epoch, total / count)

    p_e = accuracy(classifier, test if test is not None else train)
    enc.trained = True
    enc.p_e = p_e
    return enc, p_e


def encode(enc: EncoderModel, data, labels=None, chunk=1000) -> FeatureSet:
    """Embed ``data`` (array or LabeledDataset) into an N x 128 FeatureSet."""
    if not enc.trained:
        raise PreconditionError("encoder has not been trained")
    if isinstance(data, LabeledDataset):
        data, labels = data.features, data.labels if labels is None else labels
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1:] != enc.net.input_shape:
        raise ShapeError(f"{enc.arch} expects samples of shape {enc.net.input_shape}, got {data.shape[1:]}")
    return FeatureSet(enc.net.predict(data, chunk), labels)
