"""Synthetic experiments with known ground truth.

``readout_recovery`` plants a sparse readout on texture features and checks
that fitting recovers it. ``category_selectivity`` builds a selective neuron
from two texture families and tests it on fresh images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneModel, feature_map, shipped_default_backbone
from .readout import TrainConfig, correlation_significance, fit_readout_arrays, pearson_r
from .synth import TEXTURES, MannWhitneyResult, SyntheticNeuron, build_synthetic_neuron, mann_whitney_u, texture_image


@dataclass
class RecoverySetup:
    n_nonzero: int = 10
    # planted weights are +-weight_scale * U(0.5, 1)
    weight_scale: float = 0.025
    # features are multiplied by this; see the note in recovery_backbone
    feature_gain: float = 320.0
    snr: float = 10.0  # signal variance / noise variance
    split: tuple[int, int, int] = (400, 50, 25)
    image_seed: int = 123
    alpha: float = 0.05
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class RecoveryResult:
    seed: int
    test_r: float
    clean_r: float  # against the noiseless signal
    oracle_r: float  # planted weights against the noisy test responses
    r_threshold: float
    significant: bool
    best_epoch: int
    w_true: np.ndarray
    w_fit: np.ndarray
    location: tuple[float, float]


def recovery_backbone(setup: RecoverySetup) -> BackboneModel:
    """Shipped default backbone with its features scaled by ``setup.feature_gain``.

    The readout objective mixes an MSE in response units with a penalty in
    weight units, and Adam at a fixed learning rate moves each weight by at
    most about ``lr`` per step. The gain fixes the ratio of response to weight
    scale so that both constraints can be met at once.
    """
    return shipped_default_backbone().with_feature_gain(setup.feature_gain)


def texture_maps(backbone: BackboneModel, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    size = backbone.input_size
    return np.stack([feature_map(backbone, texture_image(TEXTURES[i % len(TEXTURES)], rng, size)) for i in range(n)])


def readout_recovery(seed: int, setup: RecoverySetup | None = None, maps=None, backbone=None) -> RecoveryResult:
    setup = setup or RecoverySetup()
    backbone = backbone or recovery_backbone(setup)
    n_train, n_val, n_test = setup.split
    n = n_train + n_val + n_test
    if maps is None:
        maps = texture_maps(backbone, n, setup.image_seed)
    feats = T.bilinear_sample(maps, backbone.readout_location)
    c = backbone.feature_dim

    rng = np.random.default_rng(seed)
    w_true = np.zeros(c)
    idx = rng.choice(c, setup.n_nonzero, replace=False)
    w_true[idx] = rng.choice([-1.0, 1.0], setup.n_nonzero) * rng.uniform(0.5, 1.0, setup.n_nonzero) * setup.weight_scale
    signal = feats @ w_true
    y = signal + rng.normal(0.0, signal.std() / np.sqrt(setup.snr), n)

    tr, va, te = slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, n)
    model, history = fit_readout_arrays(maps[tr], y[tr], maps[va], y[va], backbone, setup.train)
    pred = T.bilinear_sample(maps[te], model.readout_location) @ model.w
    r = pearson_r(pred, y[te])
    thr = correlation_significance(n_test, setup.alpha)
    return RecoveryResult(
        seed=seed,
        test_r=r,
        clean_r=pearson_r(pred, signal[te]),
        oracle_r=pearson_r(signal[te], y[te]),
        r_threshold=thr,
        significant=r > thr,
        best_epoch=history.best_epoch,
        w_true=w_true,
        w_fit=model.w,
        location=model.readout_location,
    )


@dataclass
class SelectivityResult:
    neuron: SyntheticNeuron
    test: MannWhitneyResult
    mean_in: float
    mean_out: float


def category_selectivity(
    in_kind: str = "stripes",
    out_kind: str = "blobs",
    n_per_class: int = 50,
    seed: int = 0,
    backbone: BackboneModel | None = None,
) -> SelectivityResult:
    """Build the neuron on one draw of each family and test it on a fresh draw of the same size."""
    backbone = backbone or shipped_default_backbone()
    rng = np.random.default_rng(seed)
    size, loc = backbone.input_size, backbone.readout_location

    def feats(kind):
        maps = np.stack([feature_map(backbone, texture_image(kind, rng, size)) for _ in range(n_per_class)])
        return T.bilinear_sample(maps, loc)

    neuron = build_synthetic_neuron(feats(in_kind), feats(out_kind))
    resp_in, resp_out = feats(in_kind) @ neuron.w, feats(out_kind) @ neuron.w
    return SelectivityResult(neuron, mann_whitney_u(resp_in, resp_out), float(resp_in.mean()), float(resp_out.mean()))
