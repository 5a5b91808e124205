"""Small dense softmax classifiers with hand-written forward and backward
passes, plus an SGD-with-momentum trainer that perturbs each minibatch with
one shared noise draw so the base classifier sees the distribution the
smoothed classifier will sample at prediction time.

Inputs are flattened pixel arrays and may be negative (flow noise can push
pixels below zero); nothing clamps them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .flow_domain import ShapeMismatchError
from .smoothing import _as_rng, _sample_increments

CHECKPOINT_VERSION = 1

_NOISE_MODES = ("none", "wasserstein_flow", "laplace_pixel")


@dataclass
class ClassifierParams:
    """Dense feed-forward parameters: zero or more ReLU hidden layers and a
    softmax output layer.  weights[i] has shape (d_in, d_out); the first
    d_in is the flattened input size and the last d_out is num_classes."""

    input_shape: tuple[int, ...]
    num_classes: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be nonempty lists of equal length")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        d_in = self.input_dim
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape != (d_in, b.size):
                raise ShapeMismatchError(
                    f"layer {i}: weight shape {w.shape} and bias shape {b.shape} "
                    f"do not chain from input width {d_in}"
                )
            d_in = b.size
        if d_in != self.num_classes:
            raise ShapeMismatchError(
                f"final layer width {d_in} != num_classes {self.num_classes}"
            )

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Parameters in the fixed order [W0, b0, W1, b1, ...] used by
        gradients, the optimizer, and pack/unpack."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def pack(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unpack(self, vec: np.ndarray) -> "ClassifierParams":
        """New params with this architecture and values taken from ``vec``
        (the inverse of pack)."""
        vec = np.asarray(vec, dtype=float)
        weights, biases = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos : pos + b.size].copy())
            pos += b.size
        if pos != vec.size:
            raise ShapeMismatchError(f"vector of size {vec.size} does not pack these params")
        return ClassifierParams(self.input_shape, self.num_classes, weights, biases)

    def forward_batch(self, X) -> np.ndarray:
        """Softmax class scores for a batch, shape (S, num_classes)."""
        X = np.asarray(X, dtype=float)
        flat = X.reshape(X.shape[0], -1)
        if flat.shape[1] != self.input_dim:
            raise ShapeMismatchError(
                f"batch of width {flat.shape[1]} fed to classifier expecting {self.input_dim}"
            )
        h = flat
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        logits = h @ self.weights[-1] + self.biases[-1]
        return _softmax(logits)

    def forward(self, x) -> np.ndarray:
        """Scores for a single image."""
        return self.forward_batch(np.asarray(x, dtype=float)[None])[0]

    def predict(self, x) -> int:
        """Base classifier's class for one image (1-based, ties to the
        lowest index)."""
        return int(np.argmax(self.forward(x))) + 1


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_params(input_shape, num_classes: int, hidden: int | None = None,
                rng=None) -> ClassifierParams:
    """Random initial parameters: logistic regression when hidden is None,
    otherwise one ReLU hidden layer of that width.  Weights are Gaussian
    with std 1/sqrt(fan-in), biases zero."""
    rng = _as_rng(rng)
    dims = [int(np.prod(input_shape))]
    if hidden is not None:
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        dims.append(int(hidden))
    dims.append(int(num_classes))
    weights = []
    biases = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return ClassifierParams(tuple(input_shape), num_classes, weights, biases)


def _forward_caches(params: ClassifierParams, flat: np.ndarray):
    """Forward pass keeping per-layer activations for backprop."""
    acts = [flat]
    pres = []
    h = flat
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = h @ w + b
        pres.append(pre)
        h = np.maximum(pre, 0.0)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return logits, acts, pres


def _check_labels(labels: np.ndarray, num_classes: int):
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ValueError(f"labels must lie in [1, {num_classes}]")


def loss_and_gradients(params: ClassifierParams, X, labels) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and its gradients in arrays() order.

    Labels are 1-based.  The loss is computed through log-sum-exp, so
    saturated logits do not produce infinities.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=int)
    flat = X.reshape(X.shape[0], -1)
    if labels.shape != (flat.shape[0],):
        raise ShapeMismatchError("one label per batch row required")
    _check_labels(labels, params.num_classes)
    y0 = labels - 1
    logits, acts, pres = _forward_caches(params, flat)
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(len(y0)), y0]))
    probs = _softmax(logits)
    delta = probs
    delta[np.arange(len(y0)), y0] -= 1.0
    delta /= len(y0)
    grads: list[np.ndarray] = []
    for layer in range(params.num_layers - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[layer].T @ delta)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (pres[layer - 1] > 0)
    grads.reverse()
    return loss, grads


def gradient(params: ClassifierParams, x, label: int) -> list[np.ndarray]:
    """Gradient of the cross-entropy loss -log score[label] for one image,
    in arrays() order."""
    _, grads = loss_and_gradients(params, np.asarray(x, dtype=float)[None], np.array([label]))
    return grads


def input_gradient_batch(params: ClassifierParams, X, labels) -> np.ndarray:
    """Per-sample gradient of each sample's own cross-entropy loss with
    respect to its input pixels; shape matches X."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=int)
    flat = X.reshape(X.shape[0], -1)
    if labels.shape != (flat.shape[0],):
        raise ShapeMismatchError("one label per batch row required")
    _check_labels(labels, params.num_classes)
    y0 = labels - 1
    logits, acts, pres = _forward_caches(params, flat)
    delta = _softmax(logits)
    delta[np.arange(len(y0)), y0] -= 1.0
    for layer in range(params.num_layers - 1, 0, -1):
        delta = (delta @ params.weights[layer].T) * (pres[layer - 1] > 0)
    return (delta @ params.weights[0].T).reshape(X.shape)


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum hyperparameters and the training-time noise.

    noise selects the scheme ("none", "wasserstein_flow" or
    "laplace_pixel"); sigma is its standard deviation.  One noise draw is
    shared by every image in a minibatch, which is cheap and sufficient
    since fresh noise arrives every batch.
    """

    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    noise: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.noise not in _NOISE_MODES:
            raise ValueError(f"noise must be one of {_NOISE_MODES}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class TrainResult:
    params: ClassifierParams
    epoch_losses: list[float] = field(default_factory=list)


def train(dataset, config: TrainConfig, hidden: int | None = None) -> TrainResult:
    """Train a classifier on a labeled dataset under the configured noise.

    Randomness (init, shuffling, noise) flows from config.seed through three
    spawned streams, so runs are bit-for-bit reproducible; with noise "none"
    or sigma 0 the noise stream is never consumed and results match exactly.
    """
    X, y = dataset.as_arrays()
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    root = np.random.default_rng(config.seed)
    r_init, r_shuffle, r_noise = root.spawn(3)
    params = init_params(X.shape[1:], dataset.num_classes, hidden, r_init)
    velocity = [np.zeros_like(a) for a in params.arrays()]
    use_noise = config.noise != "none" and config.sigma > 0
    cshape = X.shape[1:] if X.ndim == 4 else (1,) + X.shape[1:]
    losses = []
    num = len(X)
    for _ in range(config.epochs):
        perm = r_shuffle.permutation(num)
        epoch_loss = 0.0
        for start in range(0, num, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = X[idx]
            if use_noise:
                inc = _sample_increments(config.noise, config.sigma, cshape, 1, r_noise)
                xb = xb + inc.reshape((1,) + X.shape[1:])
            loss, grads = loss_and_gradients(params, xb, y[idx])
            for p, g, v in zip(params.arrays(), grads, velocity):
                np.multiply(v, config.momentum, out=v)
                v += g + config.weight_decay * p
                p -= config.learning_rate * v
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / num)
    return TrainResult(params, losses)


def accuracy(params: ClassifierParams, dataset) -> float:
    """Clean accuracy of the base classifier's argmax on a dataset."""
    X, y = dataset.as_arrays()
    if len(X) == 0:
        raise ValueError("empty dataset")
    pred = np.argmax(params.forward_batch(X), axis=1) + 1
    return float(np.mean(pred == y))


def save_checkpoint(path, params: ClassifierParams, config: TrainConfig):
    """Write params and config to a single .npz container.

    Arrays go in as w0, b0, w1, b1, ...; a JSON string under "meta" carries
    the format version, architecture and TrainConfig.
    """
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    meta = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "input_shape": list(params.input_shape),
            "num_classes": params.num_classes,
            "num_layers": params.num_layers,
            "config": asdict(config),
        }
    )
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(meta), **arrays)


def load_checkpoint(path) -> tuple[ClassifierParams, TrainConfig]:
    """Inverse of save_checkpoint; rejects unknown format versions."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        weights = [z[f"w{i}"] for i in range(meta["num_layers"])]
        biases = [z[f"b{i}"] for i in range(meta["num_layers"])]
    params = ClassifierParams(tuple(meta["input_shape"]), meta["num_classes"], weights, biases)
    return params, TrainConfig(**meta["config"])
