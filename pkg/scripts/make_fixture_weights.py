"""Regenerate the backbone weight files shipped in src/sharedviz/data/."""

from pathlib import Path

from sharedviz.backbone import BackboneModel, default_layers, save_weights

DATA = Path(__file__).resolve().parents[1] / "src" / "sharedviz" / "data"

if __name__ == "__main__":
    save_weights(BackboneModel(tuple(default_layers(64, seed=0)), (0.5, 0.5), 224), DATA / "default_224.sfvw")
    save_weights(BackboneModel(tuple(default_layers(16, seed=1)), (0.5, 0.5), 32), DATA / "fixture_32.sfvw")
    print("wrote", sorted(p.name for p in DATA.glob("*.sfvw")))
