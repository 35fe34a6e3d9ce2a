"""Command-line entry point: ``sharedviz <command> [options]``.

Exit status is 0 on success, 1 for a stage failure (message prefixed with
``[stage]``), and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import (
    extract_features,
    feature_map,
    fixture_backbone,
    load_weights,
    save_tensors,
    shipped_default_backbone,
)
from .errors import PipelineError
from .imageio import load_image, load_image_list, write_saliency_outputs
from .pipeline import PipelineConfig, format_report, load_backbone, run_pipeline
from .readout import (
    correlation_significance,
    fit_readout,
    load_manifest,
    load_readout,
    pearson_r,
    predict,
    save_readout,
)
from .saliency import check_bound, parallel_saliency
from .similarity import neuron_similarity, select_reference, top_k_activators
from .synth import activation_matrix, build_synthetic_neuron, mann_whitney_u


def _config(args) -> PipelineConfig:
    if not args.config:
        raise PipelineError("config", "this command needs --config")
    try:
        cfg = PipelineConfig.from_json(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise PipelineError("config", f"{args.config}: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _out_dir(args, cfg: PipelineConfig | None = None) -> Path:
    out = Path(args.out or (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def _fitted(cfg: PipelineConfig, backbone):
    if cfg.readout_weights:
        return _stage("load", load_readout, cfg.readout_weights, backbone), None
    manifest = _stage("load", load_manifest, cfg.manifest)
    maps = _stage("load", lambda: {e.stimulus_id: feature_map(backbone, load_image(e.path, backbone.input_size)) for e in manifest.entries})
    return _stage("fit", fit_readout, manifest, backbone, cfg.train, maps)


def cmd_fit(args) -> int:
    cfg = _config(args)
    backbone = _stage("load", load_backbone, cfg)
    model, history = _fitted(cfg, backbone)
    out = _out_dir(args, cfg)
    save_readout(model, out / "readout.sfvw")
    if history is not None:
        (out / "fit_log.tsv").write_text(history.to_tsv(), encoding="utf-8")
        print(f"best_epoch={history.best_epoch}\nbest_val_mse={history.best_val_mse!r}")
    print(f"readout={out / 'readout.sfvw'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    backbone = _stage("load", load_backbone, cfg)
    model, _ = _fitted(cfg, backbone)
    manifest = _stage("load", load_manifest, cfg.manifest)
    test = manifest.split(args.split)

    def run():
        preds = [predict(model, extract_features(backbone, load_image(e.path, backbone.input_size), model.readout_location)[0]) for e in test]
        r = pearson_r(preds, [e.response for e in test])
        thr = correlation_significance(len(test), cfg.alpha)
        return {"split": args.split, "n": len(test), "r": r, "r_threshold": thr, "significant": abs(r) > thr}

    print(format_report(_stage("eval", run)), end="")
    return 0


def cmd_select_reference(args) -> int:
    cfg = _config(args)
    backbone = _stage("load", load_backbone, cfg)
    model, _ = _fitted(cfg, backbone)

    def feats(listing):
        return [(sid, extract_features(backbone, load_image(p, backbone.input_size), model.readout_location)[0]) for sid, p in listing]

    def run():
        ooc = feats(load_image_list(cfg.ooc_images))
        if cfg.candidates:
            cands = feats(load_image_list(cfg.candidates))
        else:
            manifest = load_manifest(cfg.manifest)
            cands = feats([(e.stimulus_id, e.path) for e in manifest.entries])
        if not ooc or not cands:
            raise ValueError("empty candidate set" if not cands else "out-of-category image list is empty")
        if cfg.top_k_in is not None:
            keep = set(top_k_activators(model, cands, cfg.top_k_in).ids)
            cands = [c for c in cands if c[0] in keep]
        lookup = dict(cands)
        lines = []
        for sid in top_k_activators(model, ooc, cfg.top_k_out).ids:
            x = dict(ooc)[sid]
            ref = select_reference(x, cands, model.w)
            lines.append(f"{sid}\t{ref}\t{neuron_similarity(x, lookup[ref], model.w).value!r}")
        return lines

    print("out_id\tin_id\tsimilarity")
    for line in _stage("select", run):
        print(line)
    return 0


def cmd_visualize(args) -> int:
    if args.x_out is None and args.x_in is None:
        result = run_pipeline(_config(args))
        print(result.report_text(), end="")
        return 0 if all(result.report[k] for k in ("bound.out", "bound.in")) else 1
    if args.x_out is None or args.x_in is None or args.readout is None:
        raise PipelineError("config", "single-pair mode needs --x-out, --x-in and --readout")
    backbone = _stage("load", lambda: load_weights(args.backbone) if args.backbone else shipped_default_backbone())
    model = _stage("load", load_readout, args.readout, backbone)
    x_out = _stage("load", load_image, args.x_out, backbone.input_size)
    x_in = _stage("load", load_image, args.x_in, backbone.input_size)
    cfg = _config(args).attribution if args.config else None
    ids = (Path(args.x_out).stem, Path(args.x_in).stem)
    pair = _stage("saliency", parallel_saliency, model, x_out, x_in, cfg, ids)
    out = _out_dir(args)
    write_saliency_outputs(out, "saliency_out", x_out, pair.out_map, pair.beta)
    write_saliency_outputs(out, "saliency_in", x_in, pair.in_map, pair.beta)
    reports = [check_bound(m, strict=False) for m in (pair.out_map, pair.in_map)]
    print(f"similarity={pair.similarity.value!r}")
    for name, rep in zip(("out", "in"), reports):
        print(f"norm.{name}={rep.l2_norm!r}\nbound.{name}={'true' if rep.passed else 'false'}")
    return 0 if all(r.passed for r in reports) else 1


def cmd_synth_neuron(args) -> int:
    backbone = _stage("load", lambda: load_weights(args.backbone) if args.backbone else shipped_default_backbone())

    def matrix(listing):
        return activation_matrix(backbone, [(sid, load_image(p, backbone.input_size)) for sid, p in load_image_list(listing)])

    a_in = _stage("load", matrix, args.in_images)
    a_out = _stage("load", matrix, args.out_images)
    neuron = _stage("synth", build_synthetic_neuron, a_in, a_out)
    mw = mann_whitney_u(a_in.values @ neuron.w, a_out.values @ neuron.w)
    out = _out_dir(args)
    save_tensors(out / "synth_w.sfvw", {"synth.w": neuron.w}, {"kind": "synthetic_neuron", "eigenvalue": neuron.eigenvalue})
    report = {
        "n_in": len(a_in.ids),
        "n_out": len(a_out.ids),
        "eigenvalue": neuron.eigenvalue,
        "degenerate": neuron.degenerate,
        "mean_in": float(np.mean(a_in.values @ neuron.w)),
        "mean_out": float(np.mean(a_out.values @ neuron.w)),
        "mw.u": mw.u,
        "mw.p": mw.p,
        "mw.reliable": mw.reliable,
    }
    text = format_report(report)
    (out / "synth_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    """Reverse mode against central differences on the shipped fixture backbone."""
    backbone = fixture_backbone()
    worst = 0.0
    for seed in range(args.seeds):
        rng = np.random.default_rng(args.seed_base + seed)
        image = rng.uniform(0.05, 0.95, size=(3, backbone.input_size, backbone.input_size))
        loc = tuple(rng.uniform(0.1, 0.9, size=2))
        adj = rng.normal(size=backbone.feature_dim)
        feats, rec = extract_features(backbone, image, loc)
        grad = T.vjp(rec, adj)
        fd = T.finite_diff(lambda x: float(extract_features(backbone, x, loc)[0] @ adj), image, args.step)
        mask = np.abs(fd) > 1e-8
        err = float(np.max(np.abs(grad - fd)[mask] / np.maximum(np.abs(fd)[mask], 1e-8))) if mask.any() else 0.0
        worst = max(worst, err)
        print(f"seed={args.seed_base + seed}\tmax_rel_err={err:.3e}")
    ok = worst < args.tol
    print(f"worst={worst:.3e}\tpass={'true' if ok else 'false'}")
    return 0 if ok else 1


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config", **kw)
    common.add_argument("--seed", type=int, help="override the config seed", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="sharedviz", description="Shared-feature saliency for single neurons.", parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fit", parents=[common], help="fit the sparse readout").set_defaults(func=cmd_fit)
    p = sub.add_parser("eval", parents=[common], help="Pearson r of a readout on a manifest split")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)
    sub.add_parser("select-reference", parents=[common], help="pick the most similar in-category image per driver").set_defaults(
        func=cmd_select_reference
    )
    p = sub.add_parser("visualize", parents=[common], help="full pipeline, or a single pair with --x-out/--x-in")
    p.add_argument("--x-out")
    p.add_argument("--x-in")
    p.add_argument("--readout")
    p.add_argument("--backbone")
    p.set_defaults(func=cmd_visualize)
    p = sub.add_parser("synth-neuron", parents=[common], help="build a category-selective synthetic neuron")
    p.add_argument("--in-images", required=True, help="directory of .ppm files or id/path list")
    p.add_argument("--out-images", required=True)
    p.add_argument("--backbone")
    p.set_defaults(func=cmd_synth_neuron)
    p = sub.add_parser("gradcheck", parents=[common], help="vjp vs finite differences on the fixture backbone")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
