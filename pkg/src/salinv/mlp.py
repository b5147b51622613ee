"""Dense ReLU multilayer perceptron: forward, input gradients, SGD training,
serialization, and the bias-compensated twin construction.

Convention fixed across the whole package: the ReLU backward mask is
``pre-activation > 0`` (strict), so a pre-activation of exactly zero
blocks gradient flow.  Every saliency method reuses this mask, which is
what makes twin-network gradients match bit-for-bit.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import Dataset, ShiftVector
from .errors import EquivalenceError, FormatError
from .tensor import Rng

MODEL_MAGIC = b"MLPTWIN1"
MODEL_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)
    relu: bool

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.biases.shape} does not match "
                             f"{self.weights.shape[0]} output neurons")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class MlpModel:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ValueError(f"layer dimensions do not chain: "
                                 f"{prev.out_dim} -> {nxt.in_dim}")
        if self.layers[-1].relu:
            raise ValueError("final layer must be linear (raw logits)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


class LayerTrace(NamedTuple):
    """Per-layer forward record: the layer's input and its pre-activation."""
    x: np.ndarray
    z: np.ndarray


def init_model(layer_sizes, seed: int) -> MlpModel:
    """Fresh model with fan-in-scaled uniform weights and zero biases.

    Weights are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)); ReLU on
    every layer except the last.  Deterministic given the seed.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"need at least 2 layer sizes, got {sizes}")
    rng = Rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        limit = np.sqrt(6.0 / fan_in)
        weights = (rng.uniform((fan_out, fan_in)) * 2.0 - 1.0) * limit
        layers.append(DenseLayer(weights=weights,
                                 biases=np.zeros(fan_out),
                                 relu=i < len(sizes) - 2))
    return MlpModel(layers=layers)


def forward(model: MlpModel, x: np.ndarray):
    """Affine + ReLU chain.

    ``x`` may be a single input (d,) or a batch (n, d).  Returns
    ``(logits, traces)`` where traces hold each layer's input and
    pre-activation for the backward passes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"input has {x.shape[-1]} features, model expects "
                         f"{model.input_dim}")
    traces = []
    h = x
    for layer in model.layers:
        z = h @ layer.weights.T + layer.biases
        traces.append(LayerTrace(x=h, z=z))
        h = np.maximum(z, 0.0) if layer.relu else z
    return h, traces


def predict(model: MlpModel, images: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Batched logits without retaining traces (memory-friendly)."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty((len(images), model.num_classes))
    for start in range(0, len(images), chunk):
        h = images[start:start + chunk]
        for layer in model.layers:
            z = h @ layer.weights.T + layer.biases
            h = np.maximum(z, 0.0) if layer.relu else z
        out[start:start + len(h)] = h
    return out


def input_gradient(model: MlpModel, x: np.ndarray, j: int) -> np.ndarray:
    """d logits[j] / d x via reverse accumulation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"input_gradient expects a single input, got shape {x.shape}")
    return batch_input_gradient(model, x[None, :], j)[0]


def batch_input_gradient(model: MlpModel, xs: np.ndarray, j, chunk: int = 2048) -> np.ndarray:
    """Input gradients for a batch; ``j`` is one output index or one per row."""
    xs = np.asarray(xs, dtype=np.float64)
    n = len(xs)
    j_arr = np.broadcast_to(np.asarray(j, dtype=np.int64), (n,))
    if n and (j_arr.min() < 0 or j_arr.max() >= model.num_classes):
        raise IndexError(f"output index out of range 0..{model.num_classes - 1}")
    out = np.empty_like(xs)
    for start in range(0, n, chunk):
        block = slice(start, min(start + chunk, n))
        _, traces = forward(model, xs[block])
        g = np.zeros((block.stop - block.start, model.num_classes))
        g[np.arange(len(g)), j_arr[block]] = 1.0
        for layer, trace in zip(reversed(model.layers), reversed(traces)):
            if layer.relu:
                g = g * (trace.z > 0.0)
            g = g @ layer.weights
        out[block] = g
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def train_sgd(model: MlpModel, d: Dataset, cfg: TrainConfig) -> MlpModel:
    """Minimize softmax cross-entropy with plain mini-batch SGD.

    Works on a private copy; shuffling is driven by ``cfg.seed`` so the
    returned model is bit-reproducible for a fixed dataset and config.
    """
    if len(d) == 0:
        raise ValueError("cannot train on an empty dataset")
    if d.labels.min() < 0 or d.labels.max() >= model.num_classes:
        raise ValueError(f"labels must be class indices in 0..{model.num_classes - 1}")
    model = copy.deepcopy(model)
    rng = Rng(cfg.seed)
    n = len(d)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb, yb = d.images[batch], d.labels[batch]
            logits, traces = forward(model, xb)
            g = _softmax(logits)
            g[np.arange(len(batch)), yb] -= 1.0
            g /= len(batch)
            for layer, trace in zip(reversed(model.layers), reversed(traces)):
                if layer.relu:
                    g = g * (trace.z > 0.0)
                layer.weights -= cfg.learning_rate * (g.T @ trace.x)
                layer.biases -= cfg.learning_rate * g.sum(axis=0)
                g = g @ layer.weights
    return model


def mean_cross_entropy(model: MlpModel, d: Dataset, chunk: int = 4096) -> float:
    """Average softmax cross-entropy over the dataset."""
    total = 0.0
    for start in range(0, len(d), chunk):
        logits = predict(model, d.images[start:start + chunk])
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(len(logits))
        total -= log_probs[rows, d.labels[start:start + chunk]].sum()
    return total / len(d)


def evaluate_accuracy(model: MlpModel, d: Dataset) -> float:
    logits = predict(model, d.images)
    return float((logits.argmax(axis=1) == d.labels).mean())


# ---------------------------------------------------------------------------
# Twin construction
# ---------------------------------------------------------------------------

def compensate_bias(model: MlpModel, m) -> MlpModel:
    """Twin of ``model`` whose first-layer biases absorb the constant shift ``m``.

    Only the first-layer biases change (each neuron subtracts its weight
    row dotted with ``m``); weight arrays are shared with the original,
    which all code treats as immutable.
    """
    values = m.values if isinstance(m, ShiftVector) else np.asarray(m, dtype=np.float64)
    first = model.layers[0]
    if values.shape != (first.in_dim,):
        raise ValueError(f"shift length {values.shape} does not match input "
                         f"dimensionality {first.in_dim}")
    compensated = DenseLayer(weights=first.weights,
                             biases=first.biases - first.weights @ values,
                             relu=first.relu)
    return MlpModel(layers=[compensated] + list(model.layers[1:]))


def check_equivalence(m1: MlpModel, m2: MlpModel, d1: Dataset, d2: Dataset,
                      tol: float | None = None):
    """Max L-inf deviation of logits and input gradients over paired samples.

    Gradients are taken at the argmax class of network 1's prediction for
    each pair.  If ``tol`` is given and the logit deviation exceeds it,
    raises EquivalenceError.
    """
    if len(d1) != len(d2):
        raise ValueError(f"paired datasets differ in size: {len(d1)} vs {len(d2)}")
    logit_dev = 0.0
    grad_dev = 0.0
    chunk = 2048
    for start in range(0, len(d1), chunk):
        x1 = d1.images[start:start + chunk]
        x2 = d2.images[start:start + chunk]
        l1 = predict(m1, x1)
        l2 = predict(m2, x2)
        logit_dev = max(logit_dev, float(np.abs(l1 - l2).max()))
        js = l1.argmax(axis=1)
        g1 = batch_input_gradient(m1, x1, js)
        g2 = batch_input_gradient(m2, x2, js)
        grad_dev = max(grad_dev, float(np.abs(g1 - g2).max()))
    if tol is not None and logit_dev > tol:
        raise EquivalenceError(f"twin logit deviation {logit_dev:.3e} exceeds "
                               f"tolerance {tol:.3e}")
    return logit_dev, grad_dev


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
#
# Container layout (all integers little-endian):
#   8s   magic "MLPTWIN1"
#   u32  format version (1)
#   u32  layer count
#   per layer: u32 rows, u32 cols, u8 relu,
#              rows*cols f64 weights (row-major), rows f64 biases
#   u8   pattern section present (0/1)
#   per layer (if present): rows*cols f64 patterns, rows f64 normalizers,
#                           rows u8 degenerate flags

def model_to_bytes(model: MlpModel, patterns=None) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim, int(layer.relu)))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    if patterns is None:
        parts.append(b"\x00")
    else:
        if len(patterns.matrices) != len(model.layers):
            raise ValueError("pattern set does not match the model's layer count")
        parts.append(b"\x01")
        for layer, mat, norm, bad in zip(model.layers, patterns.matrices,
                                         patterns.normalizers, patterns.degenerate):
            if mat.shape != layer.weights.shape:
                raise ValueError(f"pattern shape {mat.shape} does not match layer "
                                 f"shape {layer.weights.shape}")
            parts.append(np.ascontiguousarray(mat, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(norm, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(bad, dtype=np.uint8).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"model file truncated at byte offset {len(self.data)} "
                              f"(wanted {self.pos + n} bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def parse_model_bytes(data: bytes):
    """Decode the container; returns (model, pattern_arrays or None)."""
    r = _Reader(data)
    magic = r.take(8)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad model magic {magic!r}, expected {MODEL_MAGIC!r}")
    version, n_layers = struct.unpack("<II", r.take(8))
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model format version {version}, "
                          f"expected {MODEL_VERSION}")
    if n_layers == 0:
        raise FormatError("model file declares zero layers")
    layers = []
    for _ in range(n_layers):
        rows, cols, relu = struct.unpack("<IIB", r.take(9))
        weights = r.floats(rows * cols).reshape(rows, cols)
        biases = r.floats(rows)
        layers.append(DenseLayer(weights=weights, biases=biases, relu=bool(relu)))
    model = MlpModel(layers=layers)
    has_patterns = r.take(1)[0]
    pattern_arrays = None
    if has_patterns not in (0, 1):
        raise FormatError(f"bad pattern-section flag {has_patterns}")
    if has_patterns:
        pattern_arrays = []
        for layer in layers:
            mat = r.floats(layer.out_dim * layer.in_dim).reshape(layer.weights.shape)
            norm = r.floats(layer.out_dim)
            bad = np.frombuffer(r.take(layer.out_dim), dtype=np.uint8).astype(bool)
            pattern_arrays.append((mat, norm, bad))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after model payload "
                          f"at byte offset {r.pos}")
    return model, pattern_arrays


def save_model(model: MlpModel, path, patterns=None) -> None:
    Path(path).write_bytes(model_to_bytes(model, patterns))


def load_model(path) -> MlpModel:
    model, _ = parse_model_bytes(Path(path).read_bytes())
    return model
