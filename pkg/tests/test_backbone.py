import json
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from sharedviz import tensor as T
from sharedviz.backbone import (
    BackboneModel,
    Conv,
    MaxPool,
    ReLU,
    default_backbone,
    extract_features,
    fixture_backbone,
    identity_backbone,
    jacobian_rows,
    load_tensors,
    load_weights,
    save_weights,
)
from sharedviz.errors import BadMagicError, ShapeError, ShapeMismatchError, TruncatedError

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def small():
    return fixture_backbone()


@pytest.fixture(scope="module")
def image():
    return np.load(GOLDEN / "fixture_images.npy")[0]


def test_zero_image_zero_bias_gives_zero_features():
    bb = default_backbone(input_size=32, feature_dim=8, seed=3)
    layers = tuple(Conv(l.kernel, np.zeros_like(l.bias), l.stride, l.padding) if isinstance(l, Conv) else l for l in bb.layers)
    feats, _ = extract_features(BackboneModel(layers, (0.3, 0.7), 32), np.zeros((3, 32, 32)))
    assert_array_equal(feats, np.zeros(8))


def test_identity_backbone_samples_pixels():
    img = np.random.default_rng(0).uniform(size=(3, 9, 9))
    bb = identity_backbone(9)
    feats, _ = extract_features(bb, img)
    assert_array_equal(feats, img[:, 4, 4])
    feats, _ = extract_features(bb, img, (0.25, 0.75))
    assert_array_equal(feats, img[:, 6, 2])


def test_fixture_features_match_loop_golden(small, image):
    feats, _ = extract_features(small, image)
    assert_allclose(feats, np.load(GOLDEN / "fixture_features.npy"), atol=1e-12, rtol=0)


def test_wrong_image_shape(small):
    with pytest.raises(ShapeError, match="expects"):
        extract_features(small, np.zeros((3, 31, 31)))


def test_backbone_must_end_in_relu():
    with pytest.raises(ValueError, match="ReLU"):
        BackboneModel((Conv(np.ones((1, 3, 1, 1)), np.zeros(1)),), (0.5, 0.5), 4)


def test_feature_dim_and_channel_check():
    assert default_backbone(32, 12).feature_dim == 12
    with pytest.raises(ShapeError):
        BackboneModel((Conv(np.ones((2, 4, 1, 1)), np.zeros(2)), ReLU()), (0.5, 0.5), 4)


def _assert_models_equal(a, b):
    assert a.readout_location == b.readout_location and a.input_size == b.input_size
    assert len(a.layers) == len(b.layers)
    for la, lb in zip(a.layers, b.layers):
        assert type(la) is type(lb)
        if isinstance(la, Conv):
            assert la.kernel.tobytes() == lb.kernel.tobytes() and la.bias.tobytes() == lb.bias.tobytes()
            assert (la.stride, la.padding) == (lb.stride, lb.padding)
        elif isinstance(la, MaxPool):
            assert la == lb


def test_roundtrip_bit_exact(tmp_path):
    bb = default_backbone(input_size=40, feature_dim=10, seed=11).with_location((0.2, 0.9))
    save_weights(bb, tmp_path / "m.sfvw")
    _assert_models_equal(bb, load_weights(tmp_path / "m.sfvw"))


def test_truncated_payload(tmp_path):
    save_weights(fixture_backbone(), tmp_path / "m.sfvw")
    raw = (tmp_path / "m.sfvw").read_bytes()
    (tmp_path / "t.sfvw").write_bytes(raw[:-8])
    with pytest.raises(TruncatedError, match="payload length"):
        load_weights(tmp_path / "t.sfvw")


def test_bad_magic(tmp_path):
    (tmp_path / "x.sfvw").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(BadMagicError):
        load_weights(tmp_path / "x.sfvw")


def _container(header: dict, payload: bytes) -> bytes:
    hb = json.dumps(header).encode("utf-8")
    return b"SFVW" + struct.pack("<I", len(hb)) + hb + payload


def test_shape_mismatch(tmp_path):
    header = {
        "tensors": [{"name": "layer0.kernel", "shape": [2, 3, 1, 1], "offset": 0}, {"name": "layer0.bias", "shape": [3], "offset": 48}],
        "meta": {"kind": "backbone", "layers": [{"type": "conv", "stride": 1, "padding": 0}, {"type": "relu"}], "readout_location": [0.5, 0.5], "input_size": 4},
    }
    (tmp_path / "s.sfvw").write_bytes(_container(header, struct.pack("<9d", *range(9))))
    with pytest.raises(ShapeMismatchError):
        load_weights(tmp_path / "s.sfvw")


def test_hand_built_container(tmp_path):
    # a: 2x3 at payload byte 0 (48 bytes); b: 4 values at byte 48 (32 bytes) -> 80 payload bytes
    header = {"tensors": [{"name": "a", "shape": [2, 3], "offset": 0}, {"name": "b", "shape": [4], "offset": 48}], "meta": {}}
    payload = struct.pack("<10d", *[0.5 * i for i in range(10)])
    (tmp_path / "h.sfvw").write_bytes(_container(header, payload))
    tensors, _ = load_tensors(tmp_path / "h.sfvw")
    assert tensors["a"].shape == (2, 3) and tensors["b"].shape == (4,)
    assert_array_equal(tensors["a"], [[0, 0.5, 1], [1.5, 2, 2.5]])
    assert_array_equal(tensors["b"], [3, 3.5, 4, 4.5])


def test_overlapping_offsets_rejected(tmp_path):
    header = {"tensors": [{"name": "a", "shape": [2], "offset": 0}, {"name": "b", "shape": [2], "offset": 8}], "meta": {}}
    (tmp_path / "o.sfvw").write_bytes(_container(header, b"\0" * 24))
    with pytest.raises(ValueError, match="overlap"):
        load_tensors(tmp_path / "o.sfvw")


def test_jacobian_dead_feature_row_is_zero(small, image):
    feats, rec = extract_features(small, image)
    fmap = rec.nodes[-1].x
    dead = [i for i in range(small.feature_dim) if not fmap[i].any()]
    assert dead, "fixture should contain at least one dead feature"
    rows = jacobian_rows(small, image, dead)
    assert not rows.any()


def test_jacobian_identity_backbone_is_indicator():
    img = np.random.default_rng(1).uniform(size=(3, 5, 5))
    rows = jacobian_rows(identity_backbone(5), img, [0, 1, 2])
    expected = np.zeros((3, 3, 5, 5))
    for k in range(3):
        expected[k, k, 2, 2] = 1.0
    assert_array_equal(rows, expected)


def test_jacobian_rows_match_single_vjp_bitwise(small, image):
    idx = np.random.default_rng(2).choice(small.feature_dim, 8, replace=False)
    batched = jacobian_rows(small, image, idx)
    threaded = jacobian_rows(small, image, idx, workers=4)
    for n, i in enumerate(idx):
        _, rec = extract_features(small, image)
        single = T.vjp(rec, np.eye(small.feature_dim)[i])
        assert batched[n].tobytes() == single.tobytes()
        assert threaded[n].tobytes() == single.tobytes()


def test_jacobian_index_out_of_range(small, image):
    with pytest.raises(IndexError):
        jacobian_rows(small, image, [small.feature_dim])


def test_determinism_across_threads(small, image):
    ref = extract_features(small, image)[0].tobytes()
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda _: extract_features(small, image)[0].tobytes(), range(8)))
    assert all(o == ref for o in outs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_features_nonnegative(seed, shift):
    bb = fixture_backbone()
    img = np.random.default_rng(seed).normal(size=(3, 32, 32)) + shift
    assert np.all(extract_features(bb, img)[0] >= 0)


def test_feature_gain_is_exact_scaling(small, image):
    base, _ = extract_features(small, image)
    scaled, _ = extract_features(small.with_feature_gain(4.0), image)
    assert_array_equal(scaled, 4.0 * base)
    with pytest.raises(ValueError):
        small.with_feature_gain(0.0)
