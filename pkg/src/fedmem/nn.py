"""Small multilayer perceptron with hand-written backpropagation.

Parameters live in one flat float64 vector laid out layer by layer as
``W`` (row-major, shape ``(in, out)``) followed by ``b`` (shape ``(out,)``).
Every function here is pure: models are never mutated in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .samples import SampleLike, as_samples

ACTIVATIONS = ("relu", "identity")
PROB_FLOOR = 1e-12

MODEL_MAGIC = b"FMNN"
MODEL_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if int(self.input_dim) <= 0 or int(self.output_dim) <= 0:
            raise ConfigurationError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return (self.input_dim + 1) * self.output_dim


@dataclass(frozen=True, eq=False)
class Model:
    layers: tuple[LayerSpec, ...]
    params: np.ndarray
    repr_index: int

    def __post_init__(self):
        _check_layers(self.layers, self.repr_index)
        params = np.array(self.params, dtype=np.float64, copy=True).ravel()
        expected = sum(layer.n_params for layer in self.layers)
        if params.shape[0] != expected:
            raise ConfigurationError(f"expected {expected} params, got {params.shape[0]}")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].output_dim

    @property
    def repr_dim(self) -> int:
        return self.layers[self.repr_index].output_dim

    def with_params(self, params: np.ndarray) -> "Model":
        return Model(self.layers, params, self.repr_index)

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only ``(W, b)`` views into ``params``, one pair per layer."""
        return _unpack(self.params, self.layers)


def mlp_spec(dims: Sequence[int]) -> list[LayerSpec]:
    """ReLU hidden layers and an identity output layer, e.g. ``[16, 64, 32, 10]``."""
    if len(dims) < 2:
        raise ConfigurationError("need at least input and output dims")
    specs = []
    for i in range(len(dims) - 1):
        act = "identity" if i == len(dims) - 2 else "relu"
        specs.append(LayerSpec(int(dims[i]), int(dims[i + 1]), act))
    return specs


def _check_layers(layers: Sequence[LayerSpec], repr_index: int) -> None:
    if not layers:
        raise ConfigurationError("model needs at least one layer")
    for a, b in zip(layers, layers[1:]):
        if a.output_dim != b.input_dim:
            raise ConfigurationError(
                f"layer dims do not chain: {a.input_dim}->{a.output_dim} then {b.input_dim}->{b.output_dim}"
            )
    if layers[-1].activation != "identity":
        raise ConfigurationError("final layer must use the identity activation")
    if not 0 <= repr_index < len(layers):
        raise ConfigurationError(f"repr_index {repr_index} out of range for {len(layers)} layers")


def _unpack(params: np.ndarray, layers: Sequence[LayerSpec]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    offset = 0
    for layer in layers:
        n_w = layer.input_dim * layer.output_dim
        W = params[offset : offset + n_w].reshape(layer.input_dim, layer.output_dim)
        offset += n_w
        b = params[offset : offset + layer.output_dim]
        offset += layer.output_dim
        out.append((W, b))
    return out


def init_model(
    spec: Sequence[LayerSpec],
    repr_index: int | None = None,
    seed: int = 0,
) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``repr_index`` defaults to the last hidden layer (or the only layer of a
    single-layer model).
    """
    layers = tuple(spec)
    if repr_index is None:
        repr_index = max(len(layers) - 2, 0)
    _check_layers(layers, repr_index)
    rng = np.random.default_rng(seed)
    chunks = []
    for layer in layers:
        bound = 1.0 / np.sqrt(layer.input_dim)
        chunks.append(rng.uniform(-bound, bound, size=layer.input_dim * layer.output_dim))
        chunks.append(np.zeros(layer.output_dim))
    return Model(layers, np.concatenate(chunks), repr_index)


def _forward_cache(model: Model, X: np.ndarray):
    """Return per-layer (input, pre-activation, output) for a batch."""
    cache = []
    a = X
    for layer, (W, b) in zip(model.layers, model.weights()):
        z = a @ W + b
        out = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.append((a, z, out))
        a = out
    return cache


def _check_input(model: Model, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"expected inputs of dim {model.input_dim}, got shape {X.shape}")
    return X


def forward_batch(model: Model, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(n, C)`` and representations ``(n, p)`` for a batch of inputs."""
    X = _check_input(model, X)
    cache = _forward_cache(model, X)
    return cache[-1][2], cache[model.repr_index][2]


def forward(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"forward expects a single feature vector, got shape {x.shape}")
    logits, rep = forward_batch(model, x[None, :])
    return logits[0], rep[0]


def embed(model: Model, X: np.ndarray) -> np.ndarray:
    return forward_batch(model, X)[1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def predict_proba(model: Model, x) -> np.ndarray:
    """Class probabilities for one vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return softmax(forward(model, x)[0])
    return softmax(forward_batch(model, x)[0])


def loss_and_grad_arrays(model: Model, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise InputError("loss_and_grad needs a non-empty batch")
    if y.shape != (n,) or y.min() < 0 or y.max() >= model.num_classes:
        raise InputError("labels must be a length-n vector of ids in [0, num_classes)")

    cache = _forward_cache(model, X)
    probs = softmax(cache[-1][2])
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, y], PROB_FLOOR))))

    delta = probs
    delta[rows, y] -= 1.0
    delta /= n
    grads = []
    weights = model.weights()
    for i in range(len(model.layers) - 1, -1, -1):
        a_in, z, _ = cache[i]
        if model.layers[i].activation == "relu":
            delta = delta * (z > 0)
        W, _ = weights[i]
        grads.append((delta.sum(axis=0), (a_in.T @ delta).ravel()))
        if i > 0:
            delta = delta @ W.T
    flat = []
    for gb, gW in reversed(grads):
        flat.append(gW)
        flat.append(gb)
    return loss, np.concatenate(flat)


def loss_and_grad(model: Model, batch: SampleLike) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. ``model.params``."""
    s = as_samples(batch)
    if len(s) == 0:
        raise InputError("loss_and_grad needs a non-empty batch")
    return loss_and_grad_arrays(model, s.X, s.y)


def mean_loss(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    probs = predict_proba(model, X)
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR))))


def sgd_step(model: Model, grad: np.ndarray, lr: float) -> Model:
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise InputError(f"gradient shape {grad.shape} does not match params {model.params.shape}")
    return model.with_params(model.params - lr * grad)


# -- serialization ---------------------------------------------------------

_ACT_CODES = {"relu": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_model(model: Model) -> bytes:
    """Little-endian binary: magic, version, layer count, repr index, layers, f32 params."""
    parts = [MODEL_MAGIC, struct.pack("<III", MODEL_VERSION, len(model.layers), model.repr_index)]
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.input_dim, layer.output_dim, _ACT_CODES[layer.activation]))
    parts.append(model.params.astype("<f4").tobytes())
    return b"".join(parts)


def load_model(blob: bytes) -> Model:
    if len(blob) < 16 or blob[:4] != MODEL_MAGIC:
        raise FormatError("not a fedmem model blob (bad magic)")
    version, n_layers, repr_index = struct.unpack_from("<III", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    offset = 16
    layers = []
    for _ in range(n_layers):
        if offset + 9 > len(blob):
            raise FormatError("truncated model header")
        d_in, d_out, code = struct.unpack_from("<IIB", blob, offset)
        offset += 9
        if code not in _ACT_NAMES:
            raise FormatError(f"unknown activation code {code}")
        layers.append(LayerSpec(d_in, d_out, _ACT_NAMES[code]))
    n_params = sum(layer.n_params for layer in layers)
    if len(blob) != offset + 4 * n_params:
        raise FormatError("model blob length does not match its header")
    params = np.frombuffer(blob, dtype="<f4", count=n_params, offset=offset).astype(np.float64)
    try:
        return Model(tuple(layers), params, repr_index)
    except ConfigurationError as exc:
        raise FormatError(str(exc)) from exc
