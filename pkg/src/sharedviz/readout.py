"""Linear readout on backbone features: prediction, sparse fitting, evaluation.

The readout predicts ``y_hat = <a, w>`` where ``a`` is the backbone feature
vector sampled at a trainable location. Fitting minimises

    mean((y_hat - y)^2) + reg_weight * sum_i (w_i^2 + eps_reg)^(1/4)

with Adam (full batch by default, one step per epoch) and keeps the
parameters that had the lowest validation MSE at the start of an epoch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .backbone import BackboneModel, feature_map, load_tensors, save_tensors
from .errors import FormatError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class ReadoutModel:
    w: np.ndarray
    readout_location: tuple[float, float]
    backbone: BackboneModel

    def __post_init__(self):
        self.w = T.as_tensor(self.w)
        self.readout_location = tuple(float(v) for v in self.readout_location)
        if self.w.shape != (self.backbone.feature_dim,):
            raise ShapeError(f"readout has {self.w.shape} weights, backbone has {self.backbone.feature_dim} features")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("readout weights must be finite")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    reg_weight: float = 0.1
    epochs: int = 2500
    eps_reg: float = 1e-8
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    init_std: float = 1e-3
    batch_size: int | None = None  # None: one full-batch step per epoch
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.betas = tuple(self.betas)


@dataclass
class TrainingLog:
    train_loss: list[float] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch]

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\ttrain_mse\tval_mse"]
        for e, row in enumerate(zip(self.train_loss, self.train_mse, self.val_mse)):
            lines.append(f"{e}\t" + "\t".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


# -- manifest -------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    stimulus_id: str
    path: Path
    response: float
    split: str


@dataclass
class ResponseManifest:
    entries: list[ManifestEntry]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.stimulus_id in seen:
                raise FormatError(f"duplicate stimulus id {e.stimulus_id!r}")
            if e.split not in SPLITS:
                raise FormatError(f"stimulus {e.stimulus_id!r} has unknown split {e.split!r}")
            seen.add(e.stimulus_id)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path) -> ResponseManifest:
    """Read ``stimulus_id<TAB>image path<TAB>response<TAB>split``; paths are relative to the file."""
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
            sid, rel, resp, split = cols
            try:
                response = float(resp)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: response {resp!r} is not a number") from None
            entries.append(ManifestEntry(sid, root / rel, response, split.strip()))
    return ResponseManifest(entries)


def save_manifest(manifest: ResponseManifest, path, root=None) -> None:
    root = Path(path).parent if root is None else Path(root)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for e in manifest.entries:
            rel = Path(e.path)
            try:
                rel = rel.relative_to(root)
            except ValueError:
                pass
            writer.writerow([e.stimulus_id, rel.as_posix(), repr(float(e.response)), e.split])


# -- model ----------------------------------------------------------------------


def predict(model: ReadoutModel, features) -> float:
    features = T.as_tensor(features)
    if features.shape != model.w.shape:
        raise ShapeError(f"features have shape {features.shape}, readout expects {model.w.shape}")
    return float(features @ model.w)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def penalty(w, reg_weight: float, eps_reg: float) -> float:
    return float(reg_weight * np.sum((w * w + eps_reg) ** 0.25))


def loss_and_grad(w, theta, maps, y, reg_weight: float, eps_reg: float, rows=None):
    """Loss and its gradient w.r.t. ``w`` and the location logits ``theta``.

    ``maps`` is ``N x c x h_a x w_a``; the location is ``sigmoid(theta)``.
    ``rows`` restricts the data term to a subset of stimuli without copying
    the maps. Returns ``(loss, mse, grad_w, grad_theta)``.
    """
    loc = _sigmoid(theta)
    a = T.bilinear_sample(maps, loc)
    resid = a @ w - y
    if rows is not None:
        a, resid = a[rows], resid[rows]
    n = len(resid)
    mse = float(resid @ resid / n)
    loss = mse + penalty(w, reg_weight, eps_reg)
    grad_w = 2.0 / n * (a.T @ resid) + reg_weight * 0.5 * w * (w * w + eps_reg) ** -0.75
    g = np.zeros(len(y))
    if rows is not None:
        g[rows] = 2.0 / n * resid
    else:
        g = 2.0 / n * resid
    _, grad_loc = T.bilinear_sample_vjp(maps, loc, g[:, None] * w[None, :], want_map=False)
    grad_theta = grad_loc * loc * (1 - loc)
    return loss, mse, grad_w, grad_theta


def loss(model: ReadoutModel, batch, reg_weight: float = 0.1, eps_reg: float = 1e-8) -> float:
    """Penalised MSE on ``batch = (maps, responses)``."""
    maps, y = batch
    maps, y = T.as_tensor(maps), T.as_tensor(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    if maps.ndim == 3:
        maps = maps[None]
    resid = T.bilinear_sample(maps, model.readout_location) @ model.w - y
    return float(resid @ resid / len(y)) + penalty(model.w, reg_weight, eps_reg)


def _mse(w, loc, maps, y) -> float:
    resid = T.bilinear_sample(maps, loc) @ w - y
    return float(resid @ resid / len(y))


def feature_maps_for(backbone: BackboneModel, images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([feature_map(backbone, img) for img in images])


def fit_readout_arrays(
    train_maps, train_y, val_maps, val_y, backbone: BackboneModel, config: TrainConfig
) -> tuple[ReadoutModel, TrainingLog]:
    train_maps, val_maps = T.as_tensor(train_maps), T.as_tensor(val_maps)
    train_y, val_y = T.as_tensor(train_y), T.as_tensor(val_y)
    if len(train_y) == 0 or len(val_y) == 0:
        raise ValueError("train and val splits must both be non-empty")
    c = backbone.feature_dim
    rng = np.random.default_rng(config.seed)
    params = np.concatenate([rng.normal(0.0, config.init_std, size=c), _logit(backbone.readout_location)])
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2 = config.betas
    step = 0
    history = TrainingLog()
    best = params.copy()
    n = len(train_y)
    batch = n if config.batch_size is None else min(config.batch_size, n)

    def adam(grad):
        nonlocal params, m, v, step
        step += 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        params = params - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)

    for epoch in range(config.epochs):
        w, theta = params[:c], params[c:]
        loss_val, mse, gw, gt = loss_and_grad(w, theta, train_maps, train_y, config.reg_weight, config.eps_reg)
        val = _mse(w, _sigmoid(theta), val_maps, val_y)
        if not (math.isfinite(loss_val) and math.isfinite(val)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}: train={loss_val}, val={val}, "
                f"|w|_2={np.linalg.norm(w):.6g}, |theta|_2={np.linalg.norm(theta):.6g}"
            )
        history.train_loss.append(loss_val)
        history.train_mse.append(mse)
        history.val_mse.append(val)
        if history.best_epoch < 0 or val < history.val_mse[history.best_epoch]:
            history.best_epoch = epoch
            best = params.copy()

        if batch == n:
            adam(np.concatenate([gw, gt]))
            continue
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            _, _, gw, gt = loss_and_grad(
                params[:c], params[c:], train_maps, train_y, config.reg_weight, config.eps_reg, rows=idx
            )
            adam(np.concatenate([gw, gt]))

    log.debug("best epoch %d, val mse %.6g", history.best_epoch, history.best_val_mse)
    model = ReadoutModel(best[:c], tuple(_sigmoid(best[c:])), backbone)
    return model, history


def fit_readout(manifest: ResponseManifest, backbone: BackboneModel, config: TrainConfig, maps: dict | None = None):
    """Fit on the manifest's train split, select on its val split.

    ``maps`` optionally maps stimulus id to a precomputed feature map.
    """
    from .imageio import load_image

    def stack(entries):
        if maps is not None:
            return np.stack([maps[e.stimulus_id] for e in entries])
        return feature_maps_for(backbone, [load_image(e.path, backbone.input_size) for e in entries])

    train, val = manifest.split("train"), manifest.split("val")
    if not train or not val:
        raise ValueError("manifest needs non-empty train and val splits")
    return fit_readout_arrays(
        stack(train), [e.response for e in train], stack(val), [e.response for e in val], backbone, config
    )


def save_readout(model: ReadoutModel, path) -> None:
    save_tensors(
        path,
        {"readout.w": model.w, "readout.location": np.asarray(model.readout_location)},
        {"kind": "readout", "feature_dim": int(model.w.size)},
    )


def load_readout(path, backbone: BackboneModel) -> ReadoutModel:
    tensors, meta = load_tensors(path)
    if "readout.w" not in tensors:
        raise FormatError(f"{path}: container has no 'readout.w' tensor")
    loc = tensors.get("readout.location", np.asarray(backbone.readout_location))
    return ReadoutModel(tensors["readout.w"], tuple(loc), backbone)


# -- evaluation -----------------------------------------------------------------


def pearson_r(pred, obs) -> float:
    pred, obs = T.as_tensor(pred), T.as_tensor(obs)
    if pred.shape != obs.shape or pred.ndim != 1:
        raise ShapeError(f"pearson_r needs equal-length vectors, got {pred.shape} and {obs.shape}")
    if pred.size < 3:
        raise ValueError("pearson_r needs at least 3 points")
    dp, do = pred - pred.mean(), obs - obs.mean()
    sp, so = np.sqrt(dp @ dp), np.sqrt(do @ do)
    if sp == 0 or so == 0:
        raise ValueError("pearson_r undefined for zero-variance input")
    return float(np.clip((dp @ do) / (sp * so), -1.0, 1.0))


def correlation_significance(n: int, alpha: float = 0.05) -> float:
    """Two-sided critical |r| under rho = 0 for a sample of size ``n``."""
    if n < 4:
        raise ValueError("correlation_significance needs n >= 4")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha == 1:
        return 0.0
    dof = n - 2
    t = stats.t.ppf(1 - alpha / 2, dof)
    return float(t / math.sqrt(dof + t * t))
