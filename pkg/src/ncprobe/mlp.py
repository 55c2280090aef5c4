"""Feedforward networks: initialization, training, feature extraction.

A :class:`Network` is a stack of affine layers with a shared hidden
nonlinearity; the final layer is always affine.  The "feature" of an input is
the post-nonlinearity output of the second-to-last layer, which is what the
collapse metrics operate on.

Training runs mini-batch Adam on gradients from the reverse-mode tape in
:mod:`ncprobe.autodiff`; the tape forward applies the same numpy operations in
the same order as :func:`forward_batch`, so the two paths agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .rng import RngStream

NONLINEARITIES = ("relu", "tanh", "identity")


class TrainingDiverged(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass
class Network:
    """Affine layers with a hidden nonlinearity tag.

    ``weights[i]`` has shape (sizes[i+1], sizes[i]); biases start at zero.
    """

    sizes: tuple
    weights: list
    biases: list
    nonlinearity: str = "relu"

    def __post_init__(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match sizes {self.sizes}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return self.sizes[-2]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Network":
        return Network(
            self.sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.nonlinearity,
        )


def init_network(layer_sizes, nonlinearity: str = "relu", seed: int = 0) -> Network:
    """Fan-in-scaled Gaussian initialization, deterministic per seed.

    Weights of layers followed by the rectifier use std sqrt(2/fan_in); other
    layers (tanh, identity, and the final affine layer) use sqrt(1/fan_in).
    Biases are zero.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"need at least two positive layer sizes, got {sizes}")
    rng = RngStream(seed)
    weights, biases = [], []
    n = len(sizes) - 1
    for i in range(n):
        fan_in = sizes[i]
        rectified = nonlinearity == "relu" and i < n - 1
        scale = np.sqrt((2.0 if rectified else 1.0) / fan_in)
        weights.append(scale * rng.normal(size=(sizes[i + 1], fan_in)))
        biases.append(np.zeros(sizes[i + 1]))
    return Network(sizes, weights, biases, nonlinearity)


def _apply_nonlinearity(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.where(z > 0, z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def forward_batch(net: Network, x: np.ndarray):
    """Plain numpy forward pass: (logits, features) for a (B, n_in) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match input size {net.sizes[0]}")
    a = x
    feature = None
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        if i == last:
            return z, feature
        a = _apply_nonlinearity(z, net.nonlinearity)
        if i == last - 1:
            feature = a
    raise AssertionError("unreachable")


def forward(net: Network, x: np.ndarray):
    """Single-input forward pass: (logits, feature) as 1-D vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.sizes[0],):
        raise ValueError(f"input shape {x.shape} does not match input size {net.sizes[0]}")
    logits, feature = forward_batch(net, x[None, :])
    return logits[0], feature[0]


def tape_forward(tape: Tape, param_nodes: list, net: Network, x_node):
    """Tape version of :func:`forward_batch` over leaf parameter nodes.

    ``param_nodes`` interleaves weight and bias nodes per layer, as produced
    by :func:`make_param_nodes`.  Returns (logits_node, feature_node).
    """
    a = x_node
    feature = None
    last = net.n_layers - 1
    for i in range(net.n_layers):
        w, b = param_nodes[2 * i], param_nodes[2 * i + 1]
        z = tape.affine(a, w, b)
        if i == last:
            return z, feature
        if net.nonlinearity == "relu":
            a = tape.relu(z)
        elif net.nonlinearity == "tanh":
            a = tape.tanh(z)
        else:
            a = z
        if i == last - 1:
            feature = a
    raise AssertionError("unreachable")


def make_param_nodes(tape: Tape, net: Network) -> list:
    nodes = []
    for w, b in zip(net.weights, net.biases):
        nodes.append(tape.leaf(w))
        nodes.append(tape.leaf(b))
    return nodes


class Adam:
    """Adam over a list of parameter arrays, updated in place.

    ``weight_decay`` is decoupled (applied as a direct shrink, not through the
    moments).  Terminal-phase collapse toward the simplex frame needs a small
    decay; plain cross-entropy keeps growing margins instead.
    """

    def __init__(self, params: list, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        shrink = 1.0 - self.lr * self.weight_decay
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if shrink != 1.0:
                p *= shrink
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    snapshot_epochs: tuple = ()


@dataclass
class TrainHistory:
    """Per-epoch training record; ``class_error`` is None for regression."""

    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    class_error: list = field(default_factory=list)
    snapshot_epochs: list = field(default_factory=list)


def _epoch_batches(m: int, batch_size: int, rng: RngStream):
    perm = rng.permutation(m)
    for start in range(0, m, batch_size):
        yield perm[start : start + batch_size]


def classification_error(net: Network, inputs: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward_batch(net, inputs)
    return float(np.mean(logits.argmax(axis=1) != labels))


def train_classifier(dataset, net: Network, config: TrainConfig, epoch_callback=None):
    """Mini-batch Adam on the fused softmax cross-entropy.

    ``dataset`` is anything with ``inputs`` and ``labels`` attributes or an
    (inputs, labels) pair.  Shuffling is seeded; the history records the mean
    training loss and the full-dataset classification error every epoch.
    ``epoch_callback(epoch, net)`` runs after each epoch and must not mutate
    the network.
    """
    inputs, labels = _unpack_labeled(dataset)
    return _train(net, config, inputs, labels, loss_kind="xent", epoch_callback=epoch_callback)


def train_regressor(inputs, targets, net: Network, config: TrainConfig, epoch_callback=None):
    """Mini-batch Adam on mean-squared error; no classification column."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets misaligned")
    return _train(net, config, inputs, targets, loss_kind="mse", epoch_callback=epoch_callback)


def _unpack_labeled(dataset):
    if hasattr(dataset, "inputs") and hasattr(dataset, "labels"):
        inputs, labels = dataset.inputs, dataset.labels
    else:
        inputs, labels = dataset
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("empty dataset")
    if len(inputs) != len(labels):
        raise ValueError("inputs and labels misaligned")
    return inputs, labels


def _train(net, config, inputs, targets, loss_kind, epoch_callback=None):
    m = len(inputs)
    if m == 0:
        raise ValueError("empty dataset")
    opt = Adam(
        net.params(), lr=config.lr, betas=config.betas, eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    shuffle_rng = RngStream(config.seed).split(0x5F0)
    history = TrainHistory(class_error=[] if loss_kind == "xent" else None)
    history.snapshot_epochs = sorted(set(config.snapshot_epochs))
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _epoch_batches(m, config.batch_size, shuffle_rng):
            tape = Tape()
            params = make_param_nodes(tape, net)
            x = tape.leaf(inputs[idx])
            logits, _ = tape_forward(tape, params, net, x)
            if loss_kind == "xent":
                loss = tape.softmax_cross_entropy_mean(logits, targets[idx])
            else:
                loss = tape.mse_mean(logits, targets[idx])
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}")
            backward(tape, loss)
            opt.step([p.grad for p in params])
            total += value * len(idx)
        history.epochs.append(epoch)
        history.loss.append(total / m)
        if loss_kind == "xent":
            history.class_error.append(classification_error(net, inputs, targets))
        if epoch_callback is not None:
            epoch_callback(epoch, net)
    return net, history


# ---------------------------------------------------------------------------
# Feature sets.
# ---------------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Feature vectors grouped by class label.

    ``features`` is (M, D); every label is in [0, n_classes) and every class
    is populated (callers filter empty classes before constructing).
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a (M, D) matrix")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels misaligned")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        counts = np.bincount(self.labels, minlength=self.n_classes)
        if (counts == 0).any():
            empty = np.nonzero(counts == 0)[0].tolist()
            raise ValueError(f"empty classes {empty}; filter labels before constructing")
        self.counts = counts

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def total(self) -> int:
        return len(self.features)

    def class_features(self, c: int) -> np.ndarray:
        return self.features[self.labels == c]

    def filter_min_count(self, min_count: int) -> "FeatureSet":
        """Drop classes with fewer than ``min_count`` samples, remap labels."""
        keep = np.nonzero(self.counts >= min_count)[0]
        if len(keep) == 0:
            raise ValueError(f"no class has at least {min_count} samples")
        remap = -np.ones(self.n_classes, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        mask = remap[self.labels] >= 0
        return FeatureSet(self.features[mask], remap[self.labels[mask]], len(keep))


def extract_features(net: Network, inputs, labels, n_classes: int | None = None) -> FeatureSet:
    """Penultimate-layer features of all inputs, grouped by label.

    Side-effect free: never mutates the network or optimizer state.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) != len(labels):
        raise ValueError("inputs and labels misaligned")
    _, features = forward_batch(net, inputs)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 0
    return FeatureSet(features, labels, n_classes)
