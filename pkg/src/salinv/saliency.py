"""Saliency and attribution methods over ReLU MLPs.

All methods attribute a single pre-softmax logit ``j`` for a single input
``x`` and return a map with one value per input dimension.  Method
identifiers (used by the audit and the CLI):

    grad      raw input gradient
    gb        guided backprop (ReLU mask + non-negative backward signal)
    pn        pattern backward pass (weights replaced by patterns)
    gxi       gradient times input
    ig-black  integrated gradients from the dataset-minimum baseline
    ig-zero   integrated gradients from the zero baseline
    dtd-lrp   relevance propagation with a zero root (z-rule)
    dtd-pa    relevance propagation with pattern roots
    sg-<id>   noise-averaged wrapper around any of the above
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .mlp import MlpModel, batch_input_gradient, forward, input_gradient
from .patterns import PatternSet
from .tensor import Rng

METHOD_IDS = ("grad", "gb", "pn", "gxi", "ig-black", "ig-zero", "dtd-lrp", "dtd-pa")

BASELINE_KINDS = ("zero-vector", "black-image", "pattern-root")

Z_RULE_EPS = 1e-9


@dataclass
class SaliencyMap:
    """Per-input-dimension attribution for one sample and one output index."""

    values: np.ndarray
    method: str
    output_index: int
    sample_id: int | None = None
    stabilized: int = 0           # z-rule denominators that needed the epsilon
    degenerate_patterns: int = 0  # degenerate neurons in the pattern set used


@dataclass(frozen=True)
class ReferencePoint:
    """Baseline/root input that reference-point methods attribute against."""

    kind: str
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown reference kind {self.kind!r}, "
                             f"expected one of {BASELINE_KINDS}")


@dataclass(frozen=True)
class SmoothGradConfig:
    n_samples: int = 50
    sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def _backward(model: MlpModel, traces, head: np.ndarray, matrices=None,
              guided: bool = False) -> np.ndarray:
    """Shared masked backward pass; ``matrices`` overrides the projection."""
    g = head
    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        if layer.relu:
            g = g * (traces[l].z > 0.0)
            if guided:
                g = np.maximum(g, 0.0)
        g = g @ (matrices[l] if matrices is not None else layer.weights)
    return g


def _one_hot(model: MlpModel, j: int, value: float = 1.0) -> np.ndarray:
    if not 0 <= j < model.num_classes:
        raise IndexError(f"output index {j} out of range 0..{model.num_classes - 1}")
    head = np.zeros(model.num_classes)
    head[j] = value
    return head


def gradient(model: MlpModel, x: np.ndarray, j: int, sample_id=None) -> SaliencyMap:
    """Raw sensitivity: d logits[j] / d x."""
    return SaliencyMap(values=input_gradient(model, x, j), method="grad",
                       output_index=j, sample_id=sample_id)


def guided_backprop(model: MlpModel, x: np.ndarray, j: int, sample_id=None) -> SaliencyMap:
    """Gradient backward pass that also zeroes negative backward signals at ReLUs."""
    _, traces = forward(model, np.asarray(x, dtype=np.float64))
    values = _backward(model, traces, _one_hot(model, j), guided=True)
    return SaliencyMap(values=values, method="gb", output_index=j, sample_id=sample_id)


def pattern_net(model: MlpModel, patterns: PatternSet, x: np.ndarray, j: int,
                sample_id=None) -> SaliencyMap:
    """Backward pass with each layer's weights replaced by its patterns.

    Forward ReLU masks still come from the actual forward pass.
    """
    _, traces = forward(model, np.asarray(x, dtype=np.float64))
    values = _backward(model, traces, _one_hot(model, j), matrices=patterns.matrices)
    return SaliencyMap(values=values, method="pn", output_index=j, sample_id=sample_id,
                       degenerate_patterns=patterns.n_degenerate)


def gradient_times_input(model: MlpModel, x: np.ndarray, j: int, sample_id=None) -> SaliencyMap:
    x = np.asarray(x, dtype=np.float64)
    values = input_gradient(model, x, j) * x
    return SaliencyMap(values=values, method="gxi", output_index=j, sample_id=sample_id)


def resolve_baseline(kind: str, d: Dataset | None = None) -> ReferencePoint:
    """Materialize a baseline vector.

    ``black-image`` is a uniform vector of the dataset's minimum pixel --
    taken from the dataset as given, i.e. after any shift was applied.
    """
    if kind == "zero-vector":
        if d is None:
            raise ValueError("zero-vector baseline needs a dataset for its dimensionality")
        return ReferencePoint(kind=kind, values=np.zeros(d.images.shape[1]))
    if kind == "black-image":
        if d is None or len(d) == 0:
            raise ValueError("black-image baseline needs a non-empty dataset")
        return ReferencePoint(kind=kind,
                              values=np.full(d.images.shape[1], float(d.images.min())))
    if kind == "pattern-root":
        return ReferencePoint(kind=kind)
    raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")


def integrated_gradients(model: MlpModel, x: np.ndarray, x0, steps: int, j: int,
                         sample_id=None, method: str = "ig") -> SaliencyMap:
    """Path-integrated gradient from ``x0`` to ``x``.

    The integral over the straight-line path is approximated with the
    midpoint rule at ``steps`` points, then multiplied elementwise by
    (x - x0).  The map's sum approximates logits[j](x) - logits[j](x0).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    if isinstance(x0, ReferencePoint):
        if x0.values is None:
            raise ValueError(f"reference point {x0.kind!r} has no resolved values")
        x0 = x0.values
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"baseline shape {x0.shape} does not match input {x.shape}")
    delta = x - x0
    alphas = (np.arange(steps) + 0.5) / steps
    path = x0[None, :] + alphas[:, None] * delta[None, :]
    mean_grad = batch_input_gradient(model, path, j).mean(axis=0)
    return SaliencyMap(values=delta * mean_grad, method=method, output_index=j,
                       sample_id=sample_id)


def dtd(model: MlpModel, x: np.ndarray, root: ReferencePoint, j: int,
        patterns: PatternSet | None = None, include_bias: bool = False,
        sample_id=None, return_layer_sums: bool = False):
    """Relevance decomposition of logits[j], propagated layer by layer.

    The output relevance is initialized to the logit value itself.  With a
    ``zero-vector`` root the z-rule applies at every layer: relevance is
    redistributed proportionally to w * x and renormalized by w @ x (the
    bias joins the denominator only when ``include_bias`` is set; the
    default keeps the per-layer relevance sum exactly conserved).
    Near-zero denominators are replaced by a sign-preserving epsilon and
    counted.  With a ``pattern-root`` the rule reduces to a backward pass
    through w * a with forward ReLU masks.
    """
    x = np.asarray(x, dtype=np.float64)
    logits, traces = forward(model, x)
    if not 0 <= j < model.num_classes:
        raise IndexError(f"output index {j} out of range 0..{model.num_classes - 1}")
    s = np.zeros(model.num_classes)
    s[j] = logits[j]
    layer_sums = [float(s.sum())]
    stabilized = 0

    if root.kind == "pattern-root":
        if patterns is None:
            raise ValueError("pattern-root relevance propagation needs a PatternSet")
        for l in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[l]
            if layer.relu:
                s = s * (traces[l].z > 0.0)
            s = s @ (layer.weights * patterns.matrices[l])
            layer_sums.append(float(s.sum()))
        out = SaliencyMap(values=s, method="dtd-pa", output_index=j, sample_id=sample_id,
                          degenerate_patterns=patterns.n_degenerate)
    elif root.kind == "zero-vector":
        for l in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[l]
            xl = traces[l].x
            zden = layer.weights @ xl
            if include_bias:
                zden = zden + layer.biases
            small = np.abs(zden) < Z_RULE_EPS
            stabilized += int(small.sum())
            if small.any():
                zden = np.where(small, np.where(zden >= 0.0, Z_RULE_EPS, -Z_RULE_EPS), zden)
            s = xl * (layer.weights.T @ (s / zden))
            layer_sums.append(float(s.sum()))
        out = SaliencyMap(values=s, method="dtd-lrp", output_index=j, sample_id=sample_id,
                          stabilized=stabilized)
    else:
        raise ValueError(f"relevance propagation supports zero-vector or pattern-root "
                         f"references, not {root.kind!r}")
    if return_layer_sums:
        return out, layer_sums
    return out


def smoothgrad(base_method, model: MlpModel, x: np.ndarray, j: int,
               cfg: SmoothGradConfig, sample_id=None) -> SaliencyMap:
    """Average of ``base_method`` maps over noisy copies of ``x``.

    ``base_method(model, x, j)`` must return a SaliencyMap.  The noise
    stream is derived from (cfg.seed, sample_id), so paired audits that
    share both see identical noise.  sigma = 0 short-circuits to the base
    method (the average of identical maps is that map).
    """
    x = np.asarray(x, dtype=np.float64)
    base = base_method(model, x, j)
    if cfg.sigma == 0:
        return SaliencyMap(values=base.values, method=f"sg-{base.method}", output_index=j,
                           sample_id=sample_id, stabilized=base.stabilized,
                           degenerate_patterns=base.degenerate_patterns)
    rng = Rng(cfg.seed).spawn(0 if sample_id is None else int(sample_id))
    noise = rng.gaussian((cfg.n_samples, len(x)), cfg.sigma)
    total = np.zeros_like(x)
    stabilized = 0
    flagged = 0
    for i in range(cfg.n_samples):
        m = base_method(model, x + noise[i], j)
        total += m.values
        stabilized += m.stabilized
        flagged = max(flagged, m.degenerate_patterns)
    return SaliencyMap(values=total / cfg.n_samples, method=f"sg-{base.method}",
                       output_index=j, sample_id=sample_id, stabilized=stabilized,
                       degenerate_patterns=flagged)


def parse_method_id(method_id: str):
    """Split a method id into (base_id, smoothed flag); validates the id."""
    smoothed = method_id.startswith("sg-")
    base = method_id[3:] if smoothed else method_id
    if base not in METHOD_IDS:
        raise ValueError(f"unknown method id {method_id!r}; valid ids are "
                         f"{', '.join(METHOD_IDS)} and their sg- variants")
    return base, smoothed


@dataclass
class AttributionContext:
    """Everything one network needs to evaluate any method id.

    The dataset provides the black-image baseline (and therefore must be
    the data this network actually sees, post-shift); patterns must have
    been estimated for this model on that same data.
    """

    model: MlpModel
    patterns: PatternSet | None = None
    dataset: Dataset | None = None
    ig_steps: int = 300
    sg: SmoothGradConfig | None = None
    dtd_include_bias: bool = False
    _black: ReferencePoint | None = field(default=None, init=False, repr=False)

    def black_baseline(self) -> ReferencePoint:
        if self._black is None:
            self._black = resolve_baseline("black-image", self.dataset)
        return self._black

    def compute(self, method_id: str, x: np.ndarray, j: int, sample_id=None) -> SaliencyMap:
        base, smoothed = parse_method_id(method_id)
        if smoothed:
            if self.sg is None:
                raise ValueError(f"method {method_id!r} needs a SmoothGradConfig")
            out = smoothgrad(lambda m, xn, jn: self.compute(base, xn, jn, sample_id),
                             self.model, x, j, self.sg, sample_id=sample_id)
            return out
        if base == "grad":
            return gradient(self.model, x, j, sample_id)
        if base == "gb":
            return guided_backprop(self.model, x, j, sample_id)
        if base == "pn":
            self._need_patterns(base)
            return pattern_net(self.model, self.patterns, x, j, sample_id)
        if base == "gxi":
            return gradient_times_input(self.model, x, j, sample_id)
        if base == "ig-black":
            return integrated_gradients(self.model, x, self.black_baseline(),
                                        self.ig_steps, j, sample_id, method="ig-black")
        if base == "ig-zero":
            zero = np.zeros(self.model.input_dim)
            return integrated_gradients(self.model, x, zero, self.ig_steps, j,
                                        sample_id, method="ig-zero")
        if base == "dtd-lrp":
            return dtd(self.model, x, ReferencePoint(kind="zero-vector"), j,
                       include_bias=self.dtd_include_bias, sample_id=sample_id)
        if base == "dtd-pa":
            self._need_patterns(base)
            return dtd(self.model, x, ReferencePoint(kind="pattern-root"), j,
                       patterns=self.patterns, sample_id=sample_id)
        raise AssertionError(f"unhandled method id {base!r}")

    def _need_patterns(self, base: str) -> None:
        if self.patterns is None:
            raise ValueError(f"method {base!r} needs an estimated PatternSet")
