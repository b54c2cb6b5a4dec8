import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubeloc.darknet import (
    ConvWeights,
    TransplantPlan,
    WeightHeader,
    WeightStore,
    bundled_cfg,
    fold_batchnorm,
    init_weights,
    parse_cfg,
    parse_weights,
    serialize_weights,
    transplant_backbone,
)
from tubeloc.errors import ParseError, ShapeError

TINY = bundled_cfg("yolov3-tiny")
FULL = bundled_cfg("yolov3")

MINI = """
[net]
width=16
height=16
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
filters=6
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0
anchors=2,3, 4,5
classes=1
"""


@pytest.fixture(scope="module")
def tiny():
    return parse_cfg(TINY)


def test_tiny_graph(tiny):
    kinds = [l.kind for l in tiny.layers]
    assert len(kinds) == 24
    assert kinds.count("convolutional") == 13 and kinds.count("maxpool") == 6
    assert kinds.count("route") == 2 and kinds.count("upsample") == 1 and kinds.count("yolo") == 2
    heads = [l.out_shape for l in tiny.yolo_layers]
    assert heads == [(18, 13, 13), (18, 26, 26)]
    assert tiny.layers[11].out_shape == (512, 13, 13)  # stride-1 pool keeps 13x13
    assert tiny.layers[20].out_shape == (384, 26, 26)
    assert tiny.n_floats() == 8_676_244
    assert tiny.default_cutoff() == 17


def test_full_graph():
    net = parse_cfg(FULL)
    assert len(net) == 107
    assert net.count("convolutional") == 75 and net.count("shortcut") == 23
    assert [l.out_shape for l in net.yolo_layers] == [(18, 13, 13), (18, 26, 26), (18, 52, 52)]
    assert net.n_floats() == 61_576_342


def test_unknown_section_named():
    with pytest.raises(ParseError, match=r"\[dropout\]"):
        parse_cfg(MINI + "\n[dropout]\nprobability=.5\n")


def test_missing_key_names_layer_and_key():
    bad = MINI.replace("filters=4\n", "")
    with pytest.raises(ParseError, match=r"layer 0 \[convolutional\].*'filters'"):
        parse_cfg(bad)


def test_unknown_key_warns():
    with pytest.warns(UserWarning, match="frobnicate"):
        parse_cfg(MINI.replace("filters=4\n", "filters=4\nfrobnicate=1\n"))


def test_dangling_route():
    with pytest.raises(ParseError, match="nonexistent"):
        parse_cfg(MINI + "\n[route]\nlayers=-9\n")


def test_yolo_channel_check():
    with pytest.raises(ParseError, match="expects 6 input channels"):
        parse_cfg(MINI.replace("filters=6", "filters=7"))


def test_header_seen_width():
    net = parse_cfg(MINI)
    n = net.n_floats()
    body = np.arange(n, dtype="<f4").tobytes()
    wide = struct.pack("<iiiq", 0, 2, 0, 1 << 40) + body
    narrow = struct.pack("<iiiI", 0, 1, 0, 77) + body
    a = parse_weights(wide, net)
    b = parse_weights(narrow, net)
    assert a.header.seen == 1 << 40 and b.header.seen == 77
    assert serialize_weights(a) == wide and serialize_weights(b) == narrow
    # bn block order: biases, scales, mean, variance, weights
    np.testing.assert_array_equal(a[0].biases, np.arange(4))
    np.testing.assert_array_equal(a[0].scales, np.arange(4, 8))
    assert a[0].weights.shape == (4, 3, 3, 3) and a[0].weights[0, 0, 0, 0] == 16


def test_short_and_long_streams():
    net = parse_cfg(MINI)
    data = serialize_weights(init_weights(net))
    with pytest.raises(ParseError, match=f"needs {net.n_floats()}"):
        parse_weights(data[:-8], net)
    with pytest.raises(ParseError, match="trailing"):
        parse_weights(data + b"\0" * 4, net)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(0, 1), (0, 2), (1, 0)]), st.integers(0, 2 ** 31))
def test_round_trip_property(seed, ver, seen):
    net = parse_cfg(MINI)
    store = init_weights(net, seed=seed)
    store = WeightStore(WeightHeader(ver[0], ver[1], 0, seen), store.layers)
    data = serialize_weights(store)
    back = parse_weights(data, net)
    assert back == store
    assert serialize_weights(back) == data


def test_tiny_round_trip(tiny):
    data = serialize_weights(init_weights(tiny, seed=3))
    assert len(data) == 20 + 4 * tiny.n_floats()
    assert serialize_weights(parse_weights(data, tiny)) == data


def test_fold_batchnorm_matches_unfolded():
    rng = np.random.default_rng(0)
    cw = ConvWeights(rng.normal(size=4), rng.normal(size=(4, 2, 3, 3)), rng.uniform(0.5, 2, 4),
                     rng.normal(size=4), rng.uniform(0.1, 2, 4))
    x = rng.normal(size=(2, 3, 3))
    raw = np.einsum("ocij,cij->o", cw.weights.astype(np.float64), x)
    bn = (raw - cw.rolling_mean) / np.sqrt(cw.rolling_variance + 1e-6) * cw.scales + cw.biases
    f = fold_batchnorm(cw)
    assert not f.batch_normalize
    np.testing.assert_allclose(np.einsum("ocij,cij->o", f.weights, x) + f.biases, bn, rtol=1e-5, atol=1e-5)


def test_transplant_blocks(tiny):
    a, b = init_weights(tiny, seed=1), init_weights(tiny, seed=2)
    out = transplant_backbone(a, b, TransplantPlan(tiny.default_cutoff()))
    for idx in tiny.conv_indices:
        ref = a if idx < 17 else b
        assert out[idx].equals(ref[idx])
    assert serialize_weights(transplant_backbone(a, b, 0)) == serialize_weights(b)


def test_transplant_mismatch_names_layer(tiny):
    other = parse_cfg(TINY.replace("filters=64", "filters=48", 1))
    with pytest.raises(ShapeError, match="layer 4"):
        transplant_backbone(init_weights(other), init_weights(tiny), 17)
    # the mismatch sits above a cutoff of 4, so that copy is fine
    transplant_backbone(init_weights(other), init_weights(tiny), 4)


def test_no_warnings_on_bundled_cfgs():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_cfg(TINY)
        parse_cfg(FULL)
