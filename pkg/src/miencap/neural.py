"""Dense feed-forward networks: forward, both losses, backprop, SGD training.

Everything runs in double precision. Training operates on a private copy of
the model, shuffles with a seeded generator, and averages gradients over the
mini-batch, so (seed, data, config) fully determine the trained parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, TrainingDivergedError, ValidationError

MODEL_FILE_VERSION = 1
ACTIVATIONS = ("relu", "identity")
LOSS_KINDS = ("mse", "softmax_cross_entropy")


@dataclass
class DenseLayer:
    """One affine map plus activation; weights are (out, in), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).ravel()
        if self.weights.ndim != 2:
            raise DimensionError(f"weights must be 2-d, got shape {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} vs {self.weights.shape[0]} output rows"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class NetworkModel:
    """An ordered dense-layer stack with free-form metadata."""

    layers: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.layers[-1].activation != "identity":
            raise ValidationError("final layer activation must be identity")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    epochs: int = 100
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class Dataset:
    """Paired input/target vectors with uniform dimensions."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def create_network(layer_sizes, seed: int, metadata: dict | None = None) -> NetworkModel:
    """Seeded scaled-uniform init: ReLU hidden layers, identity output.

    Weights draw from +-sqrt(6 / (fan_in + fan_out)).
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValidationError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(DenseLayer(w, b, act))
    meta = dict(metadata or {})
    meta.setdefault("creation_seed", int(seed))
    return NetworkModel(layers, meta)


def copy_model(model: NetworkModel) -> NetworkModel:
    layers = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
              for l in model.layers]
    return NetworkModel(layers, dict(model.metadata))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _forward_cached(model: NetworkModel, X: np.ndarray):
    """Batch forward keeping pre-activations for backprop. X is (B, in)."""
    zs, acts = [], [X]
    a = X
    for layer in model.layers:
        z = a @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        zs.append(z)
        acts.append(a)
    return zs, acts


def forward(model: NetworkModel, x) -> np.ndarray:
    """Single-vector forward pass."""
    xv = np.asarray(x, dtype=np.float64).ravel()
    if xv.size != model.input_dim:
        raise DimensionError(f"input length {xv.size}, model expects {model.input_dim}")
    _, acts = _forward_cached(model, xv[None, :])
    return acts[-1][0]


def forward_batch(model: NetworkModel, X) -> np.ndarray:
    Xv = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if Xv.shape[1] != model.input_dim:
        raise DimensionError(f"input width {Xv.shape[1]}, model expects {model.input_dim}")
    _, acts = _forward_cached(model, Xv)
    return acts[-1]


def mse_loss(output, target) -> float:
    """Unreduced sum of squared residuals over the vector components."""
    o = np.asarray(output, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if o.size != t.size:
        raise DimensionError(f"output length {o.size} vs target length {t.size}")
    d = o - t
    return float(d @ d)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target) -> float:
    """-sum target_i ln(softmax(logits)_i); targets may be any non-negative weights."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if z.size != t.size:
        raise DimensionError(f"logit length {z.size} vs target length {t.size}")
    if np.any(t < 0.0) or not np.all(np.isfinite(t)):
        raise ValidationError("targets must be finite and >= 0")
    # log-softmax keeps t_i = 0 terms exactly zero even when p_i underflows
    shifted = z - z.max()
    log_p = shifted - np.log(np.exp(shifted).sum())
    return float(-(t @ log_p))


def _batch_loss_and_delta(Y: np.ndarray, T: np.ndarray, loss_kind: str):
    """Per-sample losses and dLoss/dY for the whole batch."""
    if loss_kind == "mse":
        d = Y - T
        return np.einsum("bi,bi->b", d, d), 2.0 * d
    if loss_kind == "softmax_cross_entropy":
        shifted = Y - Y.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses = -np.einsum("bi,bi->b", T, log_p)
        p = np.exp(log_p)
        delta = p * T.sum(axis=1, keepdims=True) - T
        return losses, delta
    raise ValidationError(f"unknown loss kind {loss_kind!r}")


def _gradients(model: NetworkModel, X: np.ndarray, T: np.ndarray,
               loss_kind: str, scale: float):
    """Backprop over a batch; initial delta scaled by `scale` (1/B for a mean)."""
    zs, acts = _forward_cached(model, X)
    losses, delta = _batch_loss_and_delta(acts[-1], T, loss_kind)
    delta = delta * scale
    grads = [None] * len(model.layers)
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        if layer.activation == "relu":
            delta = delta * (zs[li] > 0.0)
        dw = delta.T @ acts[li]
        db = delta.sum(axis=0)
        grads[li] = (dw, db)
        if li > 0:
            delta = delta @ layer.weights
    return grads, float(losses.sum())


def backward(model: NetworkModel, x, target, loss_kind: str):
    """Analytic gradients of the chosen loss for one sample.

    Returns a list of (d_weights, d_bias) pairs, one per layer.
    """
    xv = np.asarray(x, dtype=np.float64).ravel()
    tv = np.asarray(target, dtype=np.float64).ravel()
    if xv.size != model.input_dim:
        raise DimensionError(f"input length {xv.size}, model expects {model.input_dim}")
    if tv.size != model.output_dim:
        raise DimensionError(f"target length {tv.size}, model outputs {model.output_dim}")
    grads, _ = _gradients(model, xv[None, :], tv[None, :], loss_kind, scale=1.0)
    return grads


def loss_value(model: NetworkModel, x, target, loss_kind: str) -> float:
    y = forward(model, x)
    if loss_kind == "mse":
        return mse_loss(y, target)
    if loss_kind == "softmax_cross_entropy":
        return softmax_cross_entropy(y, target)
    raise ValidationError(f"unknown loss kind {loss_kind!r}")


def sgd_train(model: NetworkModel, data: Dataset, config: TrainConfig,
              loss_kind: str = "mse", hook=None):
    """Mini-batch SGD on a private copy of the model.

    The batch gradient is the mean of per-sample gradients; the returned
    curve holds the mean per-sample loss of each epoch (measured as batches
    are visited, before each update). `hook(epoch, mean_loss)` is called
    after every epoch when given.
    """
    n = len(data)
    if n == 0:
        raise ValidationError("cannot train on an empty dataset")
    if data.inputs.shape[1] != model.input_dim:
        raise DimensionError(
            f"dataset input width {data.inputs.shape[1]}, model expects {model.input_dim}"
        )
    if data.targets.shape[1] != model.output_dim:
        raise DimensionError(
            f"dataset target width {data.targets.shape[1]}, model outputs {model.output_dim}"
        )
    trained = copy_model(model)
    rng = np.random.default_rng(config.seed)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            X = data.inputs[idx]
            T = data.targets[idx]
            grads, loss_sum = _gradients(trained, X, T, loss_kind, scale=1.0 / idx.size)
            total += loss_sum
            for layer, (dw, db) in zip(trained.layers, grads):
                layer.weights -= config.learning_rate * dw
                layer.bias -= config.learning_rate * db
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        curve.append(mean_loss)
        if hook is not None:
            hook(epoch, mean_loss)
    return trained, curve


def gradient_check(model: NetworkModel, x, target, loss_kind: str,
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per parameter: |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
    """
    if eps <= 0.0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    analytic = backward(model, x, target, loss_kind)
    worst = 0.0
    for layer, (dw, db) in zip(model.layers, analytic):
        for param, grad in ((layer.weights, dw), (layer.bias, db)):
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = param[ix]
                param[ix] = orig + eps
                hi = loss_value(model, x, target, loss_kind)
                param[ix] = orig - eps
                lo = loss_value(model, x, target, loss_kind)
                param[ix] = orig
                g_n = (hi - lo) / (2.0 * eps)
                g_a = grad[ix]
                err = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
                worst = max(worst, err)
    return worst


# --- model files --------------------------------------------------------------

def save_model(model: NetworkModel, path) -> None:
    doc = {
        "version": MODEL_FILE_VERSION,
        "kind": "dense-network",
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "layers": [
            {
                "activation": l.activation,
                "out": l.out_dim,
                "in": l.in_dim,
                "weights": l.weights.ravel().tolist(),  # row-major
                "bias": l.bias.tolist(),
            }
            for l in model.layers
        ],
        "metadata": model.metadata,
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_model(path) -> NetworkModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a valid model file: {e}") from e
    if not isinstance(doc, dict) or doc.get("kind") != "dense-network":
        raise FormatError(f"{path}: not a dense-network model file")
    if doc.get("version") != MODEL_FILE_VERSION:
        raise FormatError(f"{path}: unsupported model version {doc.get('version')!r}")
    try:
        layers = []
        for l in doc["layers"]:
            w = np.array(l["weights"], dtype=np.float64).reshape(l["out"], l["in"])
            layers.append(DenseLayer(w, np.array(l["bias"], dtype=np.float64),
                                     l["activation"]))
        model = NetworkModel(layers, dict(doc.get("metadata", {})))
    except (KeyError, TypeError, ValueError, DimensionError) as e:
        raise FormatError(f"{path}: malformed model file: {e}") from e
    if model.input_dim != doc["input_dim"] or model.output_dim != doc["output_dim"]:
        raise FormatError(f"{path}: declared dims do not match layer shapes")
    return model
