"""Per-neuron signal patterns estimated from data.

A pattern ``a`` is the direction of input covariation with a neuron's
output, normalized so that ``a @ w == 1``.  For ReLU-followed neurons the
statistics are restricted to the samples where the neuron actually fires;
all three terms of the covariance (E[xy], E[x], E[y]) use that same
firing subset.  Restricting E[y] to the subset is what makes the
covariance -- and therefore every pattern-based attribution -- exactly
insensitive to a constant shift of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DegeneratePatternError
from .mlp import MlpModel, forward, parse_model_bytes

DENOM_EPS = 1e-12


@dataclass
class PatternSet:
    """Patterns for every layer, shaped like that layer's weight matrix.

    ``normalizers`` records the raw scale ``a_raw @ w`` divided out per
    neuron; ``degenerate`` flags neurons that never fire or whose
    normalizer vanished, for which the fallback ``a = w / ||w||^2`` (which
    still satisfies ``a @ w == 1``) was substituted.
    """

    matrices: list[np.ndarray]    # per layer (out, in)
    normalizers: list[np.ndarray]  # per layer (out,)
    degenerate: list[np.ndarray]   # per layer bool (out,)

    @property
    def n_degenerate(self) -> int:
        return int(sum(b.sum() for b in self.degenerate))


def estimate_linear_pattern(xs: np.ndarray, ys: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pattern of a linear neuron: cov[x, y] / (w @ cov[x, y])."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if len(xs) < 2:
        raise ValueError(f"need at least 2 samples to estimate covariance, got {len(xs)}")
    cov = ((xs - xs.mean(axis=0)) * (ys - ys.mean())[:, None]).mean(axis=0)
    denom = float(w @ cov)
    if abs(denom) < DENOM_EPS:
        raise DegeneratePatternError(f"pattern normalizer w @ cov = {denom:.3e} is "
                                     f"below {DENOM_EPS:.0e}")
    return cov / denom


def estimate_relu_pattern(xs: np.ndarray, ys: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pattern of a ReLU-followed neuron from its firing regime.

    Covariance is taken over the samples with y > 0 only.  A single firing
    sample (or none) carries no covariance and is degenerate.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    fired = ys > 0.0
    if not fired.any():
        raise DegeneratePatternError("neuron never fires on the given samples")
    xf, yf = xs[fired], ys[fired]
    cov = (xf * yf[:, None]).mean(axis=0) - xf.mean(axis=0) * yf.mean()
    denom = float(w @ cov)
    if abs(denom) < DENOM_EPS:
        raise DegeneratePatternError(f"pattern normalizer w @ cov = {denom:.3e} is "
                                     f"below {DENOM_EPS:.0e}")
    return cov / denom


def root_point(x: np.ndarray, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Reference input x0 = x - a * (w @ x); satisfies w @ x0 == 0."""
    return x - a * float(w @ x)


def estimate_patterns(model: MlpModel, d: Dataset, chunk: int = 2048) -> PatternSet:
    """Patterns for every layer of ``model`` from one sweep over ``d``.

    Hidden (ReLU) layers use the firing-regime estimator, the final linear
    layer the plain-covariance estimator.  Degenerate neurons fall back to
    ``w / ||w||^2`` and are flagged, never dropped, so backward passes stay
    total.
    """
    if len(d) == 0:
        raise ValueError("cannot estimate patterns from an empty dataset")
    n_layers = len(model.layers)
    sum_xy = [np.zeros((layer.in_dim, layer.out_dim)) for layer in model.layers]
    sum_x = [np.zeros((layer.in_dim, layer.out_dim)) if layer.relu
             else np.zeros(layer.in_dim) for layer in model.layers]
    sum_y = [np.zeros(layer.out_dim) for layer in model.layers]
    n_pos = [np.zeros(layer.out_dim) for layer in model.layers]
    total = 0

    for start in range(0, len(d), chunk):
        _, traces = forward(model, d.images[start:start + chunk])
        total += len(traces[0].x)
        for l, (layer, trace) in enumerate(zip(model.layers, traces)):
            if layer.relu:
                y = np.maximum(trace.z, 0.0)
                fired = trace.z > 0.0
                sum_xy[l] += trace.x.T @ y
                sum_x[l] += trace.x.T @ fired
                n_pos[l] += fired.sum(axis=0)
            else:
                y = trace.z
                sum_xy[l] += trace.x.T @ y
                sum_x[l] += trace.x.sum(axis=0)
            sum_y[l] += y.sum(axis=0)

    matrices, normalizers, degenerate = [], [], []
    for l, layer in enumerate(model.layers):
        w = layer.weights
        if layer.relu:
            with np.errstate(divide="ignore", invalid="ignore"):
                e_xy = sum_xy[l] / n_pos[l]
                e_x = sum_x[l] / n_pos[l]
                e_y = sum_y[l] / n_pos[l]
                cov = e_xy - e_x * e_y[None, :]
            dead = n_pos[l] == 0
        else:
            e_xy = sum_xy[l] / total
            e_x = sum_x[l] / total
            e_y = sum_y[l] / total
            cov = e_xy - e_x[:, None] * e_y[None, :]
            dead = np.zeros(layer.out_dim, dtype=bool)
        denom = np.einsum("oi,io->o", w, cov)
        bad = dead | ~np.isfinite(denom) | (np.abs(denom) < DENOM_EPS)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (cov / denom[None, :]).T
        if bad.any():
            fallback = w[bad] / (w[bad] ** 2).sum(axis=1, keepdims=True)
            a[bad] = fallback
            denom = denom.copy()
            denom[bad] = np.nan
        matrices.append(a)
        normalizers.append(denom)
        degenerate.append(bad)
    return PatternSet(matrices=matrices, normalizers=normalizers, degenerate=degenerate)


def load_patterns(path) -> PatternSet | None:
    """Read the pattern section of a model container, if present."""
    _, arrays = parse_model_bytes(Path(path).read_bytes())
    if arrays is None:
        return None
    return PatternSet(matrices=[mat for mat, _, _ in arrays],
                      normalizers=[norm for _, norm, _ in arrays],
                      degenerate=[bad for _, _, bad in arrays])
