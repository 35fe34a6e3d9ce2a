"""Self-contained synthetic dataset for demos and integration tests.

Two texture families stand in for a category and its out-of-category set. A
synthetic neuron selective for the category supplies the recorded responses.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import BackboneModel, extract_features, fixture_backbone, save_weights
from .imageio import save_ppm
from .readout import ManifestEntry, ResponseManifest, save_manifest
from .synth import build_synthetic_neuron, generate_synthetic_responses, texture_image

IN_KINDS = ("stripes", "checker")
OUT_KINDS = ("blobs", "noise")


def make_demo(
    root,
    backbone: BackboneModel | None = None,
    n_in: int = 60,
    n_out: int = 20,
    split=(40, 10, 10),
    noise_std: float = 0.05,
    seed: int = 0,
) -> Path:
    """Write images, a response manifest, an out-of-category list, weights and ``config.json`` under ``root``.

    Returns the config path.
    """
    root = Path(root)
    backbone = backbone or fixture_backbone()
    if sum(split) != n_in:
        raise ValueError(f"split {split} does not add up to n_in={n_in}")
    rng = np.random.default_rng(seed)
    size = backbone.input_size
    (root / "in").mkdir(parents=True, exist_ok=True)
    (root / "ooc").mkdir(exist_ok=True)

    in_imgs = [(f"in{i:03d}", texture_image(IN_KINDS[i % 2], rng, size)) for i in range(n_in)]
    out_imgs = [(f"ooc{i:03d}", texture_image(OUT_KINDS[i % 2], rng, size)) for i in range(n_out)]
    for sid, img in in_imgs:
        save_ppm(img, root / "in" / f"{sid}.ppm")
    for sid, img in out_imgs:
        save_ppm(img, root / "ooc" / f"{sid}.ppm")

    # features from the quantised files, so responses match what the pipeline will load
    from .imageio import load_image

    def feats(folder, ids):
        return [(sid, extract_features(backbone, load_image(root / folder / f"{sid}.ppm", size))[0]) for sid in ids]

    in_feats = feats("in", [sid for sid, _ in in_imgs])
    out_feats = feats("ooc", [sid for sid, _ in out_imgs])
    neuron = build_synthetic_neuron(np.stack([f for _, f in in_feats]), np.stack([f for _, f in out_feats]))

    names = ["train"] * split[0] + ["val"] * split[1] + ["test"] * split[2]
    splits = {sid: names[i] for i, (sid, _) in enumerate(in_feats)}
    paths = {sid: Path("in") / f"{sid}.ppm" for sid, _ in in_feats}
    rows = generate_synthetic_responses(neuron.w, in_feats, noise_std, seed + 1, paths=paths, splits=splits)
    save_manifest(ResponseManifest(rows), root / "manifest.tsv")
    (root / "ooc.tsv").write_text("".join(f"{sid}\tooc/{sid}.ppm\n" for sid, _ in out_imgs), encoding="utf-8")
    save_weights(backbone, root / "backbone.sfvw")
    np.save(root / "true_w.npy", neuron.w)

    config = {
        "manifest": "manifest.tsv",
        "ooc_images": "ooc.tsv",
        "backbone_weights": "backbone.sfvw",
        "input_size": size,
        "output_dir": "out",
        "seed": seed,
        "train": {"learning_rate": 3e-3, "reg_weight": 1e-3, "epochs": 400},
        "attribution": {"smoothing_sigma": 1.0},
        "top_k_out": 3,
    }
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return path
