"""Parallel backpropagation saliency for an image pair.

Each latent feature gets its own pixel map (a Jacobian row, or an integrated
gradients row). Rows are collapsed over colour, smoothed, and scaled to unit
norm, then summed with weights

    beta_i = (a_in_i w_i)(a_out_i w_i) / (|a_in * w| |a_out * w|)

The same ``beta`` is used for both images. With nonnegative activations the
weights are nonnegative and sum to the neuron-specific similarity, so each
map's L2 norm is at most that similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .backbone import BackboneModel, extract_features, jacobian_rows
from .errors import BoundViolationError, DegenerateError, ShapeError
from .readout import ReadoutModel
from .similarity import SimilarityScore, neuron_similarity

METHODS = ("vanilla", "integrated_gradients")


@dataclass
class AttributionConfig:
    backbone_method: str = "vanilla"
    ig_steps: int = 32
    smoothing_sigma: float = 2.0
    norm_floor: float = 1e-10
    workers: int = 1

    def __post_init__(self):
        if self.backbone_method not in METHODS:
            raise ValueError(f"backbone_method must be one of {METHODS}, got {self.backbone_method!r}")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be at least 1")
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be nonnegative")


@dataclass
class SaliencyMap:
    values: np.ndarray
    l2_norm: float
    bound: float
    image_id: str | None = None

    @classmethod
    def from_values(cls, values, bound: float, image_id=None) -> "SaliencyMap":
        values = T.as_tensor(values)
        return cls(values, float(np.linalg.norm(values)), float(bound), image_id)


class FeatureRows(NamedTuple):
    rows: np.ndarray  # k x h x w
    indices: list[int]
    degenerate: np.ndarray  # bool per row


class SaliencyPair(NamedTuple):
    out_map: SaliencyMap
    in_map: SaliencyMap
    similarity: SimilarityScore
    beta: np.ndarray


class BoundReport(NamedTuple):
    l2_norm: float
    bound: float
    passed: bool

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict}: |I|_2 = {self.l2_norm!r} <= s = {self.bound!r}"


def simple_gradient_map(model: ReadoutModel, image) -> np.ndarray:
    """Gradient of the predicted response w.r.t. the image, ``3 x h x w``."""
    _, record = extract_features(model.backbone, image, model.readout_location)
    return T.vjp(record, model.w)


def integrated_gradients_rows(
    backbone: BackboneModel, image, m: int, feature_indices: Sequence[int], location=None, workers: int = 1
) -> np.ndarray:
    """Jacobian rows averaged over ``k/m * image`` for ``k = 1..m`` (zero baseline, no input product)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    image = T.as_tensor(image)
    total = None
    for k in range(1, m + 1):
        rows = jacobian_rows(backbone, (k / m) * image, feature_indices, location, workers)
        total = rows if total is None else total + rows
    return total / m


def gaussian_smooth(plane, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with radius ``ceil(3 sigma)`` and zero padding."""
    plane = T.as_tensor(plane)
    if sigma == 0:
        return plane.copy()
    radius = math.ceil(3 * sigma)
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-(taps**2) / (2 * sigma**2))
    kernel /= kernel.sum()
    out = plane
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        windows = sliding_window_view(np.pad(out, pad), 2 * radius + 1, axis=axis)
        out = windows @ kernel
    return out


def per_feature_maps(model: ReadoutModel, image, config: AttributionConfig, feature_indices=None) -> FeatureRows:
    """Smoothed, unit-norm pixel map per feature; rows below ``norm_floor`` are zeroed and flagged."""
    backbone = model.backbone
    indices = list(range(backbone.feature_dim)) if feature_indices is None else [int(i) for i in feature_indices]
    if not indices:
        h = w = backbone.input_size
        return FeatureRows(np.zeros((0, h, w)), [], np.zeros(0, dtype=bool))
    if config.backbone_method == "vanilla":
        raw = jacobian_rows(backbone, image, indices, model.readout_location, config.workers)
    else:
        raw = integrated_gradients_rows(backbone, image, config.ig_steps, indices, model.readout_location, config.workers)
    rows = gaussian_smooth(raw.sum(axis=1), config.smoothing_sigma)
    norms = np.sqrt(np.einsum("kij,kij->k", rows, rows))
    degenerate = norms < config.norm_floor
    safe = np.where(degenerate, 1.0, norms)
    rows = np.where(degenerate[:, None, None], 0.0, rows / safe[:, None, None])
    return FeatureRows(rows, indices, degenerate)


def beta_weights(a_in, a_out, w) -> np.ndarray:
    a_in, a_out, w = T.as_tensor(a_in), T.as_tensor(a_out), T.as_tensor(w)
    if not (a_in.shape == a_out.shape == w.shape):
        raise ShapeError(f"shape mismatch: a_in {a_in.shape}, a_out {a_out.shape}, w {w.shape}")
    p, q = a_in * w, a_out * w
    norm_p, norm_q = np.linalg.norm(p), np.linalg.norm(q)
    if norm_p == 0 or norm_q == 0:
        raise DegenerateError("zero weighted activation norm; beta undefined")
    return p * q / (norm_p * norm_q)


def _weighted_sum(beta, fr: FeatureRows, shape) -> np.ndarray:
    out = np.zeros(shape)
    for row, i in zip(fr.rows, fr.indices):  # fixed order keeps the sum bit-stable
        out += beta[i] * row
    return out


def parallel_saliency(
    model: ReadoutModel, x_out, x_in, config: AttributionConfig | None = None, ids=("x_out", "x_in")
) -> SaliencyPair:
    config = config or AttributionConfig()
    backbone, w = model.backbone, model.w
    a_out, _ = extract_features(backbone, x_out, model.readout_location)
    a_in, _ = extract_features(backbone, x_in, model.readout_location)
    for name, a in ((ids[0], a_out), (ids[1], a_in)):
        if np.linalg.norm(a * w) == 0:
            raise DegenerateError(f"image {name!r} has zero weighted activation norm")
    s = neuron_similarity(a_out, a_in, w, pair=tuple(ids))
    beta = beta_weights(a_in, a_out, w)
    active = np.flatnonzero(beta).tolist()
    shape = (backbone.input_size, backbone.input_size)
    out_rows = per_feature_maps(model, x_out, config, active)
    in_rows = per_feature_maps(model, x_in, config, active)
    out_map = SaliencyMap.from_values(_weighted_sum(beta, out_rows, shape), s.value, ids[0])
    in_map = SaliencyMap.from_values(_weighted_sum(beta, in_rows, shape), s.value, ids[1])
    return SaliencyPair(out_map, in_map, s, beta)


def check_bound(smap: SaliencyMap, tol: float = 1e-9, strict: bool = True) -> BoundReport:
    report = BoundReport(smap.l2_norm, smap.bound, smap.l2_norm <= smap.bound + tol)
    if strict and not report.passed:
        raise BoundViolationError(
            f"saliency norm {smap.l2_norm!r} exceeds similarity bound {smap.bound!r} for image "
            f"{smap.image_id!r}; check for negative activations or unnormalised rows"
        )
    return report
