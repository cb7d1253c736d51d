"""A small numpy classifier for (channels, samples) epochs.

Layers are plain records (``LayerSpec``) and parameters live in a frozen
``Classifier``; every pass is a function of the two. Backpropagation is
written by hand so that gradients with respect to both the parameters and
the input are exact, which the attacks and the input-calibration step of the
Mahalanobis detector rely on.

All arithmetic is float64.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    HeaderError,
    InputShapeError,
    LabelError,
    NumericError,
    ParameterError,
    TruncatedPayloadError,
)

KINDS = ("dense", "conv1d", "activation", "dropout", "flatten")
ACTIVATIONS = ("relu", "elu")
MODES = ("deterministic", "stochastic")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a classifier.

    ``width`` is the number of units for ``dense`` and the number of filters
    for ``conv1d``.
    """

    kind: str
    width: int | None = None
    kernel: int | None = None
    stride: int = 1
    dropout_rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv1d") and (self.width is None or self.width < 1):
            raise ConfigError(f"{self.kind} layer needs a positive width")
        if self.kind == "conv1d" and (self.kernel is None or self.kernel < 1):
            raise ConfigError("conv1d layer needs a positive kernel")
        if self.stride < 1:
            raise ConfigError("stride must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def to_dict(self):
        out = {"kind": self.kind}
        if self.kind in ("dense", "conv1d"):
            out["width"] = self.width
        if self.kind == "conv1d":
            out["kernel"] = self.kernel
            out["stride"] = self.stride
        if self.kind == "dropout":
            out["dropout_rate"] = self.dropout_rate
        if self.kind == "activation":
            out["activation"] = self.activation
        return out

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad layer spec {d!r}: {exc}") from None


def dense(width):
    return LayerSpec("dense", width=width)


def conv1d(filters, kernel, stride=1):
    return LayerSpec("conv1d", width=filters, kernel=kernel, stride=stride)


def activation(kind="relu"):
    return LayerSpec("activation", activation=kind)


def dropout(rate):
    return LayerSpec("dropout", dropout_rate=rate)


def flatten():
    return LayerSpec("flatten")


def layer_shapes(layers, input_shape):
    """Return the output shape (without batch axis) of every layer."""
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for spec in layers:
        if spec.kind == "conv1d":
            if len(shape) != 2:
                raise ConfigError("conv1d expects a (channels, length) input")
            if spec.kernel > shape[1]:
                raise ConfigError(f"conv kernel {spec.kernel} exceeds input length {shape[1]}")
            shape = (spec.width, (shape[1] - spec.kernel) // spec.stride + 1)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigError("dense expects a flat input; add a flatten layer")
            shape = (spec.width,)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


@dataclass(frozen=True, eq=False)
class Classifier:
    layers: tuple
    params: tuple
    input_shape: tuple
    num_classes: int
    seed: int | None = None

    @property
    def head_index(self):
        """Index of the final dense layer; its input is the penultimate activation."""
        return len(self.layers) - 1

    @property
    def has_dropout(self):
        return any(s.kind == "dropout" for s in self.layers)

    def predict(self, x):
        return np.argmax(forward(self, x), axis=-1)

    def same_parameters(self, other):
        if len(self.params) != len(other.params):
            return False
        for p, q in zip(self.params, other.params):
            if p.keys() != q.keys():
                return False
            if any(not np.array_equal(p[k], q[k]) for k in p):
                return False
        return True


def _freeze(params):
    frozen = []
    for p in params:
        q = {}
        for name, value in p.items():
            arr = np.array(value, dtype=np.float64, copy=True)
            arr.flags.writeable = False
            q[name] = arr
        frozen.append(q)
    return tuple(frozen)


def make_classifier(layers, params, input_shape, seed=None):
    layers = tuple(layers)
    if not layers or layers[-1].kind != "dense":
        raise ConfigError("the final layer must be dense")
    if layers[-1].width < 2:
        raise ConfigError("a classifier needs at least two classes")
    shapes = layer_shapes(layers, input_shape)
    in_shapes = [tuple(input_shape)] + shapes[:-1]
    for i, spec in enumerate(layers):
        p = params[i]
        if spec.kind == "dense":
            expected = {"W": (in_shapes[i][0], spec.width), "b": (spec.width,)}
        elif spec.kind == "conv1d":
            expected = {"W": (spec.width, in_shapes[i][0], spec.kernel), "b": (spec.width,)}
        else:
            expected = {}
        got = {k: tuple(np.shape(v)) for k, v in p.items()}
        if got != expected:
            raise ConfigError(f"layer {i} parameters have shapes {got}, expected {expected}")
    return Classifier(
        layers=layers,
        params=_freeze(params),
        input_shape=tuple(int(s) for s in input_shape),
        num_classes=layers[-1].width,
        seed=seed,
    )


def init_classifier(layers, input_shape, seed=0):
    """Glorot-uniform weights, zero biases."""
    layers = tuple(layers)
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(layers, input_shape)
    in_shapes = [tuple(input_shape)] + shapes[:-1]
    params = []
    for spec, in_shape in zip(layers, in_shapes):
        if spec.kind == "dense":
            fan_in, fan_out = in_shape[0], spec.width
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params.append({
                "W": rng.uniform(-lim, lim, size=(fan_in, fan_out)),
                "b": np.zeros(spec.width),
            })
        elif spec.kind == "conv1d":
            fan_in = in_shape[0] * spec.kernel
            fan_out = spec.width * spec.kernel
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params.append({
                "W": rng.uniform(-lim, lim, size=(spec.width, in_shape[0], spec.kernel)),
                "b": np.zeros(spec.width),
            })
        else:
            params.append({})
    return make_classifier(layers, params, input_shape, seed=seed)


# -- per-layer passes ------------------------------------------------------


def _conv_windows(h, kernel, stride):
    win = np.lib.stride_tricks.sliding_window_view(h, kernel, axis=2)
    return win[:, :, ::stride, :]


def _layer_forward(spec, p, h, mode, rng):
    kind = spec.kind
    if kind == "dense":
        return h @ p["W"] + p["b"], h
    if kind == "conv1d":
        win = _conv_windows(h, spec.kernel, spec.stride)
        out = np.tensordot(win, p["W"], axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        return out + p["b"][None, :, None], (h.shape, win)
    if kind == "activation":
        if spec.activation == "relu":
            return np.maximum(h, 0.0), h
        return np.where(h > 0, h, np.expm1(np.minimum(h, 0.0))), h
    if kind == "dropout":
        if mode == "deterministic" or spec.dropout_rate == 0.0:
            return h, None
        keep = 1.0 - spec.dropout_rate
        scale = (rng.random(h.shape) < keep) / keep
        return h * scale, scale
    # flatten
    return h.reshape(h.shape[0], -1), h.shape


def _layer_backward(spec, p, g, cache, need_params):
    kind = spec.kind
    if kind == "dense":
        grads = {"W": cache.T @ g, "b": g.sum(axis=0)} if need_params else None
        return g @ p["W"].T, grads
    if kind == "conv1d":
        in_shape, win = cache
        grads = None
        if need_params:
            grads = {"W": np.tensordot(g, win, axes=([0, 2], [0, 2])), "b": g.sum(axis=(0, 2))}
        # dwin: (N, L_out, C_in, K)
        dwin = np.tensordot(g, p["W"], axes=([1], [0]))
        dx = np.zeros(in_shape)
        n_out = g.shape[2]
        stop = spec.stride * (n_out - 1) + 1
        for k in range(spec.kernel):
            dx[:, :, k:k + stop:spec.stride] += dwin[:, :, :, k].transpose(0, 2, 1)
        return dx, grads
    if kind == "activation":
        if spec.activation == "relu":
            return g * (cache > 0), None
        return g * np.where(cache > 0, 1.0, np.exp(np.minimum(cache, 0.0))), None
    if kind == "dropout":
        return (g if cache is None else g * cache), None
    return g.reshape(cache), None


def _run(model, h, mode, rng, start=0, stop=None):
    stop = len(model.layers) if stop is None else stop
    caches = []
    for i in range(start, stop):
        h, cache = _layer_forward(model.layers[i], model.params[i], h, mode, rng)
        caches.append(cache)
    return h, caches


def _backprop(model, g, caches, start=0, need_params=False):
    """Backpropagate ``g`` through layers ``start .. start+len(caches)-1``."""
    grads = [None] * len(model.layers)
    for j in reversed(range(len(caches))):
        i = start + j
        g, grads[i] = _layer_backward(model.layers[i], model.params[i], g, caches[j], need_params)
    return g, grads


# -- public passes ---------------------------------------------------------


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.ndim != 3 or x.shape[1:] != model.input_shape:
        raise InputShapeError(f"expected input shape {model.input_shape} (optionally batched), got {x.shape}")
    return x, False


def _check_mode(mode, rng):
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if mode == "stochastic":
        if rng is None:
            raise ParameterError("stochastic mode needs an rng or seed")
        return np.random.default_rng(rng)
    return None


def forward(model, x, mode="deterministic", rng=None):
    """Logits for one epoch ``(C, T)`` or a batch ``(N, C, T)``.

    In stochastic mode each dropout layer draws its mask from ``rng`` (a
    ``numpy.random.Generator`` or a seed).
    """
    rng = _check_mode(mode, rng)
    xb, single = _as_batch(model, x)
    out, _ = _run(model, xb, mode, rng)
    return out[0] if single else out


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model, x):
    return softmax(forward(model, x))


def _check_labels(model, y, n):
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n, int(y))
    if y.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if np.any((y < 0) | (y >= model.num_classes)):
        raise LabelError(f"labels must lie in 0..{model.num_classes - 1}")
    return y.astype(np.int64)


def logit_gradient(model, x, grad_logits):
    """Vector-Jacobian product of the deterministic logits with ``grad_logits``."""
    xb, single = _as_batch(model, x)
    g = np.asarray(grad_logits, dtype=np.float64).reshape(xb.shape[0], model.num_classes)
    _, caches = _run(model, xb, "deterministic", None)
    dx, _ = _backprop(model, g, caches)
    return dx[0] if single else dx


def logits_and_gradient(model, x, grad_fn):
    """One forward pass, then backprop ``grad_fn(logits)``.

    Returns ``(logits, input_gradient)`` for a batch. Used by the iterative
    attacks, which need both at every step.
    """
    logits, caches = _run(model, x, "deterministic", None)
    dx, _ = _backprop(model, grad_fn(logits), caches)
    return logits, dx


def input_gradient(model, x, y):
    """Gradient of the cross-entropy loss with respect to the input.

    For a batch, row ``i`` is the gradient of example ``i``'s own loss.
    """
    xb, single = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    logits, caches = _run(model, xb, "deterministic", None)
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    dx, _ = _backprop(model, g, caches)
    if not np.all(np.isfinite(dx)):
        raise NumericError("non-finite input gradient")
    return dx[0] if single else dx


def cross_entropy(model, x, y):
    xb, _ = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    logits = forward(model, xb)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y]


def penultimate(model, x):
    """Deterministic activation that feeds the final dense layer."""
    xb, single = _as_batch(model, x)
    h, _ = _run(model, xb, "deterministic", None, stop=model.head_index)
    return h[0] if single else h


def feature_gradient(model, x, grad_features):
    """Vector-Jacobian product of ``penultimate`` with ``grad_features``."""
    xb, single = _as_batch(model, x)
    h, caches = _run(model, xb, "deterministic", None, stop=model.head_index)
    g = np.asarray(grad_features, dtype=np.float64).reshape(h.shape)
    dx, _ = _backprop(model, g, caches)
    return dx[0] if single else dx


def stochastic_scores(model, x, n_passes, seed):
    """Softmax scores from ``n_passes`` independent dropout samples.

    Returns an array of shape ``(n_passes, k)`` for one epoch or
    ``(n_passes, N, k)`` for a batch. Layers before the first dropout layer
    are deterministic, so they run once.
    """
    if n_passes < 1:
        raise ParameterError("n_passes must be positive")
    rng = np.random.default_rng(seed)
    xb, single = _as_batch(model, x)
    first = next((i for i, s in enumerate(model.layers) if s.kind == "dropout"), len(model.layers))
    h, _ = _run(model, xb, "deterministic", None, stop=first)
    scores = np.empty((n_passes, xb.shape[0], model.num_classes))
    for t in range(n_passes):
        out, _ = _run(model, h, "stochastic", rng, start=first)
        scores[t] = softmax(out)
    return scores[:, 0] if single else scores


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    weight_decay: float = 1e-2
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def loss_and_param_grads(model, x, y, rng=None, mode="deterministic"):
    """Mean cross-entropy over the batch and its parameter gradients."""
    xb, _ = _as_batch(model, x)
    y = _check_labels(model, y, xb.shape[0])
    logits, caches = _run(model, xb, mode, rng)
    p = softmax(logits)
    n = len(y)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300)))
    g = p
    g[np.arange(n), y] -= 1.0
    _, grads = _backprop(model, g / n, caches, need_params=True)
    return loss, grads


def train(layers, x, y, config=TrainConfig(), input_shape=None):
    """Mini-batch SGD on the mean cross-entropy.

    Dropout layers are active during training. Same ``config.seed`` gives
    identical parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    if x.ndim != 3:
        raise InputShapeError("training data must be (N, C, T)")
    input_shape = tuple(x.shape[1:]) if input_shape is None else tuple(input_shape)
    seq = np.random.SeedSequence(config.seed)
    init_seed, loop_seed = seq.spawn(2)
    model = init_classifier(layers, input_shape, seed=int(init_seed.generate_state(1)[0]))
    y = _check_labels(model, y, x.shape[0])
    rng = np.random.default_rng(loop_seed)

    params = [{k: v.copy() for k, v in p.items()} for p in model.params]
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    n = x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            current = Classifier(model.layers, tuple(params), model.input_shape, model.num_classes)
            _, grads = loss_and_param_grads(current, x[idx], y[idx], rng=rng, mode="stochastic")
            for p, v, g in zip(params, velocity, grads):
                if g is None:
                    continue
                for name in p:
                    step = g[name]
                    if name == "W" and config.weight_decay:
                        step = step + config.weight_decay * p[name]
                    v[name] *= config.momentum
                    v[name] -= config.learning_rate * step
                    p[name] += v[name]
    for p in params:
        if not all(np.all(np.isfinite(v)) for v in p.values()):
            raise NumericError("training diverged to non-finite parameters")
    return make_classifier(model.layers, params, input_shape, seed=config.seed)


# -- checkpoints -----------------------------------------------------------

MODEL_MAGIC = b"EEGADV-MODEL\n"


def save_model(model, path):
    """Write a self-describing checkpoint: magic, header length, JSON header, float64 payload."""
    tensors = []
    chunks = []
    for i, p in enumerate(model.params):
        for name in sorted(p):
            tensors.append({"layer": i, "name": name, "shape": list(p[name].shape)})
            chunks.append(np.ascontiguousarray(p[name], dtype="<f8").tobytes())
    header = {
        "format": "eegadv-model",
        "version": 1,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "layers": [s.to_dict() for s in model.layers],
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_model(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise HeaderError(f"{path}: not a model checkpoint")
    off = len(MODEL_MAGIC)
    if len(raw) < off + 8:
        raise HeaderError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    try:
        header = json.loads(raw[off:off + hlen])
        layers = tuple(LayerSpec.from_dict(d) for d in header["layers"])
        tensors = header["tensors"]
        input_shape = tuple(header["input_shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"{path}: malformed header: {exc}") from None
    off += hlen
    params = [{} for _ in layers]
    for t in tensors:
        count = int(np.prod(t["shape"]))
        end = off + 8 * count
        if end > len(raw):
            raise TruncatedPayloadError(f"{path}: payload ends before tensor {t['layer']}/{t['name']}")
        params[t["layer"]][t["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(t["shape"])
        off = end
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return make_classifier(layers, params, input_shape, seed=header.get("seed"))
