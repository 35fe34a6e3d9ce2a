"""End-to-end run: fit a readout, pick the driving pair, render paired saliency."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneModel, feature_map, load_weights, shipped_default_backbone
from .errors import DegenerateError, PipelineError
from .imageio import load_image, load_image_list, write_saliency_outputs
from .readout import (
    ReadoutModel,
    TrainConfig,
    correlation_significance,
    fit_readout,
    load_manifest,
    load_readout,
    pearson_r,
    predict,
    save_readout,
)
from .saliency import AttributionConfig, check_bound, parallel_saliency
from .similarity import neuron_similarity, select_reference, top_k_activators

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    manifest: str
    ooc_images: str
    backbone_weights: str | None = None
    readout_weights: str | None = None
    candidates: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    input_size: int = 224
    output_dir: str = "out"
    seed: int = 0
    top_k_out: int = 1
    top_k_in: int | None = None
    alpha: float = 0.05

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "PipelineConfig":
        data = dict(data)
        base = Path(base_dir)
        for key in ("manifest", "ooc_images", "backbone_weights", "readout_weights", "candidates", "output_dir"):
            if data.get(key) is not None:
                data[key] = str(base / data[key])
        data["train"] = TrainConfig(**data.get("train", {}))
        data["attribution"] = AttributionConfig(**data.get("attribution", {}))
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for key in ("manifest", "ooc_images", "backbone_weights", "readout_weights", "candidates"):
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise FileNotFoundError(f"config field {key!r}: {value} does not exist")
        if self.top_k_out < 1 or (self.top_k_in is not None and self.top_k_in < 1):
            raise ValueError("top_k_out and top_k_in must be at least 1")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")


@dataclass
class RunResult:
    report: dict
    files: list[Path]

    def report_text(self) -> str:
        return format_report(self.report)


def format_report(report: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return "".join(f"{k}={fmt(v)}\n" for k, v in report.items())


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc

        return inner

    return wrap


def load_backbone(config: PipelineConfig) -> BackboneModel:
    backbone = load_weights(config.backbone_weights) if config.backbone_weights else shipped_default_backbone()
    if backbone.input_size != config.input_size:
        raise ValueError(f"backbone input size {backbone.input_size} differs from config input_size {config.input_size}")
    return backbone


def run_pipeline(config: PipelineConfig) -> RunResult:
    """Fit, rank, select, visualise, and write artifacts under ``config.output_dir``.

    Any failing stage raises :class:`PipelineError` tagged with the stage name;
    nothing is written unless every stage before ``write`` succeeded, and
    files from a failed write are removed.
    """
    train_cfg = TrainConfig(**{**asdict(config.train), "seed": config.seed})

    @_stage("load")
    def load():
        config.validate()
        backbone = load_backbone(config)
        manifest = load_manifest(config.manifest)
        images = {e.stimulus_id: load_image(e.path, backbone.input_size) for e in manifest.entries}
        maps = {sid: feature_map(backbone, img) for sid, img in images.items()}
        ooc = [(sid, load_image(p, backbone.input_size)) for sid, p in load_image_list(config.ooc_images)]
        if config.candidates:
            cands = [(sid, load_image(p, backbone.input_size)) for sid, p in load_image_list(config.candidates)]
        else:
            cands = list(images.items())
        return backbone, manifest, maps, ooc, cands

    backbone, manifest, maps, ooc, cands = load()

    @_stage("fit")
    def fit():
        if config.readout_weights:
            return load_readout(config.readout_weights, backbone), None
        return fit_readout(manifest, backbone, train_cfg, maps=maps)

    model, history = fit()

    @_stage("eval")
    def evaluate():
        out = {}
        test = manifest.split("test")
        out["model.test_n"] = len(test)
        if len(test) >= 4:
            preds = [predict(model, T.bilinear_sample(maps[e.stimulus_id], model.readout_location)) for e in test]
            r = pearson_r(preds, [e.response for e in test])
            thr = correlation_significance(len(test), config.alpha)
            out.update({"model.test_r": r, "model.test_r_threshold": thr, "model.test_significant": abs(r) > thr})
        if history is not None:
            out["model.best_epoch"] = history.best_epoch
            out["model.best_val_mse"] = history.best_val_mse
        return out

    metrics = evaluate()

    @_stage("rank")
    def rank():
        if not ooc:
            raise ValueError("out-of-category image list is empty")
        feats = [(sid, _features(backbone, img, model)) for sid, img in ooc]
        drivers = top_k_activators(model, feats, config.top_k_out).ids
        cand_feats = [(sid, _features(backbone, img, model)) for sid, img in cands]
        if config.top_k_in is not None and cand_feats:
            keep = set(top_k_activators(model, cand_feats, config.top_k_in).ids)
            cand_feats = [cf for cf in cand_feats if cf[0] in keep]
        return dict(feats), drivers, cand_feats

    ooc_feats, drivers, cand_feats = rank()

    @_stage("select")
    def select():
        if not cand_feats:
            raise ValueError("empty candidate set")
        best = None
        for sid in drivers:
            try:
                ref = select_reference(ooc_feats[sid], cand_feats, model.w)
            except DegenerateError:
                continue
            s = neuron_similarity(ooc_feats[sid], dict(cand_feats)[ref], model.w).value
            if best is None or s > best[2]:
                best = (sid, ref, s)
        if best is None:
            raise DegenerateError("no driver/candidate pair has nonzero weighted activations")
        return best

    out_id, in_id, _ = select()

    @_stage("saliency")
    def saliency():
        x_out = dict(ooc)[out_id]
        x_in = dict(cands)[in_id]
        pair = parallel_saliency(model, x_out, x_in, config.attribution, ids=(out_id, in_id))
        return x_out, x_in, pair

    x_out, x_in, pair = saliency()
    bound_out = check_bound(pair.out_map, strict=False)
    bound_in = check_bound(pair.in_map, strict=False)

    report = {
        "seed": config.seed,
        "backbone.feature_dim": backbone.feature_dim,
        "backbone.input_size": backbone.input_size,
        "readout.location_u": model.readout_location[0],
        "readout.location_v": model.readout_location[1],
        "readout.nonzero_1e-3": int(np.sum(np.abs(model.w) >= 1e-3)),
        **metrics,
        "pair.out_id": out_id,
        "pair.in_id": in_id,
        "similarity": pair.similarity.value,
        "beta.sum": float(np.sum(pair.beta)),
        "norm.out": pair.out_map.l2_norm,
        "norm.in": pair.in_map.l2_norm,
        "bound.out": bound_out.passed,
        "bound.in": bound_in.passed,
        "attribution.method": config.attribution.backbone_method,
    }

    @_stage("write")
    def write():
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        try:
            written += write_saliency_outputs(out_dir, "saliency_out", x_out, pair.out_map, pair.beta)
            written += write_saliency_outputs(out_dir, "saliency_in", x_in, pair.in_map, pair.beta)
            path = out_dir / "readout.sfvw"
            written.append(path)
            save_readout(model, path)
            if history is not None:
                path = out_dir / "fit_log.tsv"
                written.append(path)
                path.write_text(history.to_tsv(), encoding="utf-8")
            path = out_dir / "report.txt"
            written.append(path)
            path.write_text(format_report(report), encoding="utf-8")
        except Exception:
            for p in written:
                p.unlink(missing_ok=True)
            raise
        return written

    files = write()
    log.info("pipeline done: pair %s / %s, s=%.4f", out_id, in_id, pair.similarity.value)
    return RunResult(report, files)


def _features(backbone: BackboneModel, image, model: ReadoutModel) -> np.ndarray:
    return T.bilinear_sample(feature_map(backbone, image), model.readout_location)
