"""Dense feed-forward classifier over a flat parameter vector.

Layout of the flat vector: layers in order; inside a layer the weight
matrix comes first (row-major, one row per output neuron), then the biases.
A :class:`DenseNet` holds its weights as views into one contiguous float64
buffer, so moving between the flat and the layered view costs nothing.
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"CSNETCKP"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"SGD diverged in epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """ReLU hidden layers, softmax output."""

    layer_sizes: tuple[int, ...]

    hidden_activation = "relu"
    output_activation = "softmax"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive: {sizes}")
        if sizes[-1] < 2:
            raise ValueError("classification needs at least 2 output classes")

    @classmethod
    def parse(cls, text: str) -> "NetworkSpec":
        return cls(tuple(int(s) for s in text.split(",")))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def __str__(self):
        return ",".join(map(str, self.layer_sizes))


@dataclass(frozen=True)
class ParameterLayout:
    total: int
    offsets: tuple[tuple[int, int], ...]  # (weight_offset, bias_offset) per layer
    shapes: tuple[tuple[int, int], ...]  # (n_out, n_in) per layer


def layout(spec) -> ParameterLayout:
    """Flat-vector layout for a :class:`NetworkSpec` or a plain list of layer sizes."""
    sizes = spec.layer_sizes if isinstance(spec, NetworkSpec) else tuple(spec)
    offsets, shapes = [], []
    pos = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        offsets.append((pos, pos + n_in * n_out))
        shapes.append((n_out, n_in))
        pos += n_in * n_out + n_out
    return ParameterLayout(total=pos, offsets=tuple(offsets), shapes=tuple(shapes))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # N x n_inputs
    labels: np.ndarray  # N ints

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.inputs.shape[0] < 1:
            raise ValueError("empty batch")

    def __len__(self):
        return self.labels.shape[0]


class DenseNet:
    def __init__(self, spec: NetworkSpec, params: Optional[np.ndarray] = None, copy: bool = True):
        self.spec = spec
        self.layout = layout(spec)
        if params is None:
            flat = np.zeros(self.layout.total)
        else:
            flat = np.asarray(params, dtype=np.float64)
            self._check_length(flat)
            if copy:
                flat = flat.copy()
        self._flat = flat
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for (w_off, b_off), (n_out, n_in) in zip(self.layout.offsets, self.layout.shapes):
            self.weights.append(flat[w_off:b_off].reshape(n_out, n_in))
            self.biases.append(flat[b_off:b_off + n_out])

    @classmethod
    def view(cls, spec: NetworkSpec, params: np.ndarray) -> "DenseNet":
        """A network whose weights alias ``params`` (no copy)."""
        return cls(spec, params, copy=False)

    def _check_length(self, flat: np.ndarray) -> None:
        if flat.shape != (self.layout.total,):
            raise ValueError(f"expected {self.layout.total} parameters, got shape {flat.shape}")

    def get_params(self) -> np.ndarray:
        return self._flat.copy()

    def set_params(self, flat) -> "DenseNet":
        flat = np.asarray(flat, dtype=np.float64)
        self._check_length(flat)
        self._flat[:] = flat
        return self

    @property
    def n_params(self) -> int:
        return self.layout.total


def get_params(net: DenseNet) -> np.ndarray:
    return net.get_params()


def set_params(net: DenseNet, flat) -> DenseNet:
    return net.set_params(flat)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(net: DenseNet, inputs: np.ndarray):
    if inputs.ndim != 2 or inputs.shape[1] != net.spec.n_inputs:
        raise ValueError(f"expected inputs of width {net.spec.n_inputs}, got shape {inputs.shape}")
    acts = [inputs]
    pre = []
    a = inputs
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ w.T + b
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite pre-activation in layer {i + 1}", layer=i + 1)
        pre.append(z)
        a = softmax(z) if i == last else relu(z)
        acts.append(a)
    return acts, pre


def forward(net: DenseNet, batch) -> np.ndarray:
    """Class probabilities, one row per sample."""
    inputs = batch.inputs if isinstance(batch, Batch) else np.asarray(batch)
    acts, _ = _forward_cached(net, inputs)
    return acts[-1]


def loss_cce(probabilities: np.ndarray, labels: np.ndarray) -> float:
    p = probabilities[np.arange(labels.shape[0]), labels]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def predict(net: DenseNet, batch) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return np.argmax(forward(net, batch), axis=1)


def backprop(net: DenseNet, batch: Batch) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the flat parameters."""
    return _gradient(net, batch.inputs, batch.labels)[0]


def _gradient(net: DenseNet, inputs: np.ndarray, labels: np.ndarray):
    acts, pre = _forward_cached(net, inputs)
    n = labels.shape[0]
    delta = acts[-1].copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grad = np.empty(net.layout.total)
    for i in range(len(net.weights) - 1, -1, -1):
        w_off, b_off = net.layout.offsets[i]
        n_out = net.layout.shapes[i][0]
        grad[w_off:b_off] = (delta.T @ acts[i]).ravel()
        grad[b_off:b_off + n_out] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (pre[i - 1] > 0)
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite gradient")
    return grad, acts[-1]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int  # 1-based
    loss: float  # mean minibatch loss over the epoch
    steps: int  # cumulative minibatch updates
    elapsed_s: float


def sgd_train(net: DenseNet, dataset: Batch, learning_rate: float = 0.01,
              batch_size: int = 32, epochs: int = 1,
              rng: Optional[np.random.Generator] = None,
              epoch_callback: Optional[Callable[[DenseNet, EpochRecord], Optional[bool]]] = None,
              time_budget: Optional[float] = None) -> tuple[DenseNet, list[EpochRecord]]:
    """Plain minibatch SGD, no momentum, in place on ``net``.

    Samples are reshuffled every epoch with ``rng``.  Training stops after
    ``epochs`` epochs, when ``epoch_callback`` returns ``True``, or at the end
    of the first epoch whose cumulative wall time reaches ``time_budget``.
    """
    if not learning_rate >= 0:
        raise ValueError("learning rate must be non-negative")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = np.random.default_rng() if rng is None else rng
    n = len(dataset)
    log: list[EpochRecord] = []
    steps = 0
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            labels = dataset.labels[idx]
            try:
                grad, probs = _gradient(net, dataset.inputs[idx], labels)
            except NonFiniteError:
                raise DivergenceError(epoch, math.nan) from None
            total += loss_cce(probs, labels) * len(idx)
            net.set_params(net._flat - learning_rate * grad)
            steps += 1
        loss = total / n
        if not math.isfinite(loss):
            raise DivergenceError(epoch, loss)
        record = EpochRecord(epoch, loss, steps, time.perf_counter() - start)
        log.append(record)
        if epoch_callback is not None and epoch_callback(net, record):
            break
        if time_budget is not None and record.elapsed_s >= time_budget:
            break
    return net, log


# -- checkpoint file ----------------------------------------------------------
# little-endian: 8-byte magic b"CSNETCKP", uint32 version, uint32 layer count L,
# L x uint32 layer sizes, then the flat parameter vector as float64.

def save_checkpoint(path, net: DenseNet) -> None:
    sizes = net.spec.layer_sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(f"<II{len(sizes)}I", CHECKPOINT_VERSION, len(sizes), *sizes))
        fh.write(net._flat.astype("<f8").tobytes())


def load_checkpoint(path) -> DenseNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, n_layers = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    head = 16 + 4 * n_layers
    if len(data) < head:
        raise CheckpointError(f"{path}: truncated header")
    spec = NetworkSpec(struct.unpack_from(f"<{n_layers}I", data, 16))
    total = layout(spec).total
    if len(data) != head + 8 * total:
        raise CheckpointError(f"{path}: expected {total} parameters, "
                              f"found {(len(data) - head) / 8:g}")
    params = np.frombuffer(data, dtype="<f8", offset=head).astype(np.float64)
    return DenseNet(spec, params, copy=False)


def parameter_count(layer_sizes: Sequence[int]) -> int:
    return layout(NetworkSpec(tuple(layer_sizes))).total
