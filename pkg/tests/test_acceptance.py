"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that is printed in the session summary.
"""

import json
import math
import time

import numpy as np
import pytest

from sharedviz import tensor as T
from sharedviz.backbone import default_backbone, extract_features, fixture_backbone, shipped_default_backbone
from sharedviz.demo import make_demo
from sharedviz.errors import DegenerateError
from sharedviz.experiments import category_selectivity, readout_recovery
from sharedviz.pipeline import PipelineConfig, run_pipeline
from sharedviz.readout import ReadoutModel, correlation_significance
from sharedviz.saliency import AttributionConfig, beta_weights, parallel_saliency
from sharedviz.similarity import neuron_similarity
from sharedviz.synth import TEXTURES, build_synthetic_neuron, symmetric_eigendecomp, texture_image

SEEDS = 20
STEP = 1e-5


def _rel_err(grad, fd):
    """Max |grad - fd| / |grad| over elements with |grad| > 1e-8."""
    grad, fd = np.ravel(grad), np.ravel(fd)
    mask = np.abs(grad) > 1e-8
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(grad[mask] - fd[mask]) / np.abs(grad[mask])))


def _check_op(forward, x, rng):
    """vjp of ``forward`` (which records into a fresh record) against central differences of <out, g>."""
    rec = T.ComputationRecord()
    out = forward(x, rec)
    g = rng.normal(size=out.shape)
    grad = T.vjp(rec, g)
    fd = T.finite_diff(lambda z: float(np.sum(forward(z, None) * g)), x, STEP)
    return _rel_err(grad, fd)


def _gradient_cases():
    def conv_case(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        k, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        return (lambda x, r: T.conv2d(x, k, b, stride, pad, record=r)), rng.normal(size=(2, 7, 7))

    def relu_case(rng):
        return (lambda x, r: T.relu(x, record=r)), rng.normal(size=(3, 5, 5))

    def pool_case(rng):
        window = int(rng.integers(2, 4))
        stride = int(rng.integers(1, window + 1))
        return (lambda x, r: T.maxpool2d(x, window, stride, record=r)), rng.normal(size=(2, 8, 8))

    def sample_case(rng):
        loc = tuple(rng.uniform(0, 1, size=2))
        return (lambda x, r: T.bilinear_sample(x, loc, record=r)), rng.normal(size=(4, 6, 5))

    def backbone_case(rng):
        bb = default_backbone(input_size=16, feature_dim=8, seed=int(rng.integers(1 << 30)))
        loc = tuple(rng.uniform(0.05, 0.95, size=2))

        def fwd(x, r):
            feats, rec = extract_features(bb, x, loc)
            if r is not None:
                r.nodes.extend(rec.nodes)
            return feats

        return fwd, rng.uniform(0, 1, size=(3, 16, 16))

    return {"conv2d": conv_case, "relu": relu_case, "maxpool2d": pool_case, "bilinear_sample": sample_case, "backbone": backbone_case}


def test_criterion_1_gradient_oracle(verdict):
    start = time.perf_counter()
    worst = {}
    for name, make in _gradient_cases().items():
        errs = []
        for seed in range(SEEDS):
            rng = np.random.default_rng(1000 + seed)
            forward, x = make(rng)
            errs.append(_check_op(forward, x, rng))
        worst[name] = max(errs)
    # location gradient of the sampler, which the readout fit uses
    errs = []
    for seed in range(SEEDS):
        rng = np.random.default_rng(2000 + seed)
        fm, g = rng.normal(size=(4, 6, 5)), rng.normal(size=4)
        loc = rng.uniform(0.02, 0.98, size=2)
        _, gloc = T.bilinear_sample_vjp(fm, loc, g, want_map=False)
        errs.append(_rel_err(gloc, T.finite_diff(lambda l: float(T.bilinear_sample(fm, l) @ g), loc, STEP)))
    worst["bilinear_location"] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {SEEDS} seeds each; {elapsed:.1f}s"
    assert verdict(1, "gradient oracle", ok, detail), detail


def _random_fixture(rng):
    bb = default_backbone(input_size=16, feature_dim=8, seed=int(rng.integers(1 << 30)))
    w = rng.normal(size=8) * (rng.uniform(size=8) < 0.7)
    model = ReadoutModel(w, tuple(rng.uniform(0.1, 0.9, size=2)), bb)
    kinds = rng.choice(TEXTURES, size=2)
    return model, texture_image(kinds[0], rng, 16), texture_image(kinds[1], rng, 16)


def test_criterion_2_norm_bound_fuzz(verdict):
    rng = np.random.default_rng(7)
    configs = {
        "vanilla": AttributionConfig(smoothing_sigma=1.0),
        "integrated_gradients": AttributionConfig("integrated_gradients", smoothing_sigma=1.0),
    }
    checked, skipped, violations, worst = 0, 0, 0, -np.inf
    while checked < 100:
        model, x_out, x_in = _random_fixture(rng)
        try:
            pairs = [parallel_saliency(model, x_out, x_in, cfg) for cfg in configs.values()]
        except DegenerateError:
            skipped += 1
            continue
        checked += 1
        for pair in pairs:
            for smap in (pair.out_map, pair.in_map):
                worst = max(worst, smap.l2_norm - smap.bound)
                violations += smap.l2_norm > smap.bound + 1e-9
    detail = f"{checked} fixtures x 2 methods x 2 maps, {violations} violations, max(|I|-s)={worst:.2e}, {skipped} degenerate redrawn"
    assert verdict(2, "norm bound", violations == 0, detail), detail


def test_criterion_3_beta_sum_identity(verdict):
    rng = np.random.default_rng(3)
    worst, n = 0.0, 0
    while n < 1000:
        c = int(rng.integers(1, 65))
        a_in = rng.uniform(0, 5, size=c) * (rng.uniform(size=c) < 0.8)
        a_out = rng.uniform(0, 5, size=c) * (rng.uniform(size=c) < 0.8)
        w = rng.normal(size=c) * (rng.uniform(size=c) < 0.5)
        if np.linalg.norm(a_in * w) == 0 or np.linalg.norm(a_out * w) == 0:
            continue
        n += 1
        worst = max(worst, abs(beta_weights(a_in, a_out, w).sum() - neuron_similarity(a_in, a_out, w).value))
    detail = f"1000 pairs, max |sum(beta) - s| = {worst:.2e}"
    assert verdict(3, "sum-beta identity", worst <= 1e-12, detail), detail


def test_criterion_4_rayleigh_oracle(verdict):
    rng = np.random.default_rng(4)
    margin, recon = np.inf, 0.0
    for _ in range(20):
        a_in = rng.uniform(0, 1, size=(int(rng.integers(6, 40)), 6))
        a_out = rng.uniform(0, 1, size=(int(rng.integers(6, 40)), 6))
        d = a_in.T @ a_in - a_out.T @ a_out
        w = build_synthetic_neuron(a_in, a_out).w
        v = rng.normal(size=(10_000, 6))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        margin = min(margin, float(w @ d @ w - np.max(np.einsum("ni,ij,nj->n", v, d, v))))
        vals, vecs = symmetric_eigendecomp(d)
        recon = max(recon, float(np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - d))))
    ok = margin >= -1e-8 and recon <= 1e-8
    detail = f"20 pairs, min(w'Dw - max v'Dv) = {margin:.3e}, max reconstruction error {recon:.1e}"
    assert verdict(4, "Rayleigh oracle", ok, detail), detail


def test_criterion_5_readout_recovery(verdict):
    start = time.perf_counter()
    res = readout_recovery(seed=0)
    elapsed = time.perf_counter() - start
    threshold = correlation_significance(25, 0.05)
    significant = res.test_r > threshold
    ok = res.test_r > 0.9 and significant and elapsed < 600
    detail = (
        f"test r={res.test_r:.4f} (r vs clean signal {res.clean_r:.4f}, planted-w ceiling {res.oracle_r:.4f}), "
        f"significance threshold r>{threshold:.4f}: {'significant' if significant else 'not significant'}, "
        f"best epoch {res.best_epoch}, {elapsed:.0f}s"
    )
    assert verdict(5, "readout recovery", ok, detail), detail


def test_criterion_6_category_selectivity(verdict, tmp_path):
    sel = category_selectivity("stripes", "blobs", n_per_class=50, seed=0)
    config_path = make_demo(tmp_path / "demo", backbone=shipped_default_backbone(), seed=0)
    cfg = PipelineConfig.from_json(config_path)
    cfg.top_k_out = 1
    result = run_pipeline(cfg)
    bound_ok = result.report["bound.out"] and result.report["bound.in"]
    ok = sel.test.p < 0.01 and sel.mean_in > sel.mean_out and bound_ok
    detail = (
        f"held-out Mann-Whitney p={sel.test.p:.2e} (U={sel.test.u:.0f}, 50 vs 50), "
        f"pipeline pair {result.report['pair.out_id']}/{result.report['pair.in_id']} "
        f"s={result.report['similarity']:.4f} |I_out|={result.report['norm.out']:.4f} |I_in|={result.report['norm.in']:.4f}"
    )
    assert verdict(6, "category selectivity", ok, detail), detail


def _low_similarity_pairs(n_wanted=20):
    """Readouts on two features chosen so each image drives a different one."""
    bb = fixture_backbone()
    rng = np.random.default_rng(6)
    images = [texture_image(TEXTURES[i % 4], rng, 32) for i in range(40)]
    feats = [extract_features(bb, im, (0.5, 0.5))[0] for im in images]
    pairs = []
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            a, b = feats[i], feats[j]
            # feature favouring image i and one favouring image j; zeros allowed on the other side
            p, q = int(np.argmax(a / (b + 1e-12))), int(np.argmax(b / (a + 1e-12)))
            if p == q or a[p] == 0 or b[q] == 0:
                continue
            w = np.zeros(bb.feature_dim)
            w[p], w[q] = 1 / a[p], 1 / b[q]
            model = ReadoutModel(w, (0.5, 0.5), bb)
            s = neuron_similarity(a, b, w).value
            if s < 0.05:
                pairs.append((model, images[i], images[j], s))
            if len(pairs) == n_wanted:
                return pairs
    return pairs


def test_criterion_7_low_similarity_low_intensity(verdict):
    pairs = _low_similarity_pairs()
    worst, max_s = 0.0, 0.0
    for model, x_out, x_in, s in pairs:
        pair = parallel_saliency(model, x_out, x_in, AttributionConfig(smoothing_sigma=1.0))
        assert math.isclose(pair.similarity.value, s, rel_tol=1e-12)
        max_s = max(max_s, s)
        worst = max(worst, pair.out_map.l2_norm, pair.in_map.l2_norm)
    ok = len(pairs) >= 20 and worst < 0.05
    detail = f"{len(pairs)} constructed pairs with s<0.05 (max s {max_s:.4f}), max |I| = {worst:.4f}"
    assert verdict(7, "low similarity", ok, detail), detail


def test_criterion_8_determinism(verdict, tmp_path):
    config_path = make_demo(tmp_path / "demo", n_in=30, n_out=8, split=(20, 5, 5), seed=8)
    data = json.loads(config_path.read_text())
    outputs = []
    for run in ("run1", "run2"):
        cfg = PipelineConfig.from_dict({**data, "output_dir": str(tmp_path / run)}, config_path.parent)
        run_pipeline(cfg)
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).iterdir())})
    names = ["report.txt", "saliency_out.overlay.ppm", "saliency_in.overlay.ppm"]
    same = outputs[0].keys() == outputs[1].keys() and all(outputs[0][k] == outputs[1][k] for k in outputs[0])
    ok = same and all(n in outputs[0] for n in names)
    detail = f"{len(outputs[0])} files compared byte-for-byte across two seeded runs"
    assert verdict(8, "determinism", ok, detail), detail
