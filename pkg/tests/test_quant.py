import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubeloc.darknet import bundled_cfg, init_weights, parse_cfg
from tubeloc.errors import DataError
from tubeloc.imgcore import GrayImage, letterbox
from tubeloc.nnexec import Calibration, Model, QuantParams, affine_params, calibrate, image_to_tensor
from tubeloc.nnexec.quant import (
    INPUT_PARAMS,
    QuantizedModel,
    quantize_multiplier,
    requantize,
    round_half_away,
    symmetric_params,
)


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, -0.5, -2.5, 2.4]), [1, 2, -1, -3, 2])


def test_affine_params_include_zero():
    p = affine_params(0.5, 2.0)
    lo, hi = p.range
    assert lo <= 0 <= hi and hi >= 2.0 - p.scale
    assert p.quantize(0.0) == p.zero_point
    assert affine_params(0, 0) == QuantParams(1.0, 0)


def test_input_params_cover_unit_range():
    assert INPUT_PARAMS.quantize(0.0) == -128 and INPUT_PARAMS.quantize(1.0) == 127


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 0), st.floats(0, 50), st.floats(0, 1))
def test_quantize_error_bound(lo, hi, frac):
    if hi - lo < 1e-6:
        return
    p = affine_params(lo, hi)
    x = lo + frac * (hi - lo)
    assert abs(float(p.dequantize(p.quantize(x))) - x) <= p.scale / 2 + 1e-6 * max(1, abs(x))


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-6, 0.999), st.integers(-(2 ** 20), 2 ** 20))
def test_fixed_point_multiplier(m, acc):
    m0, shift = quantize_multiplier(m)
    assert 2 ** 30 <= m0 < 2 ** 31
    assert abs(m0 * 2.0 ** -shift - m) <= m * 2 ** -30
    got = int(requantize(np.array([acc]), m0, shift, 0)[0])
    ref = int(np.clip(round_half_away(acc * m0 / 2 ** shift), -128, 127))
    assert got == ref


def test_symmetric_weights():
    p = symmetric_params(np.array([-0.5, 0.25]))
    assert p.zero_point == 0 and p.scale == pytest.approx(0.5 / 127)
    assert p.quantize(-0.5) == -127


@pytest.fixture(scope="module")
def setup():
    net = parse_cfg(bundled_cfg("yolov3-tiny"))
    model = Model(net, init_weights(net, seed=0))
    rng = np.random.default_rng(0)
    imgs = [GrayImage(rng.integers(0, 256, (300, 400), np.uint8)) for _ in range(3)]
    cal = calibrate(model, imgs)
    return model, imgs, cal


def test_calibration_keys(setup):
    model, _, cal = setup
    assert "input" in cal
    assert all(f"act.{l.index}" in cal for l in model.net.layers)
    assert all(f"w.{i}" in cal for i in model.net.conv_indices)


def test_calibration_sidecar_round_trip(setup, tmp_path):
    _, _, cal = setup
    cal.save(tmp_path / "a.calib")
    back = Calibration.load(tmp_path / "a.calib")
    assert back == cal
    back.save(tmp_path / "b.calib")
    assert (tmp_path / "a.calib").read_bytes() == (tmp_path / "b.calib").read_bytes()


def test_calibration_deterministic(setup):
    model, imgs, cal = setup
    assert calibrate(model, imgs) == cal


def test_empty_calibration_set(setup):
    with pytest.raises(DataError):
        calibrate(setup[0], [])


def test_missing_layer_params_named(setup):
    model, _, cal = setup
    partial = Calibration({k: v for k, v in cal.items() if k != "act.4"})
    with pytest.raises(DataError, match="layer 4"):
        QuantizedModel(model, partial)


def test_integer_outputs_are_int8(setup):
    model, imgs, cal = setup
    q = QuantizedModel(model, cal)
    outs = q.forward_q(image_to_tensor(letterbox(imgs[0])[0]))
    assert all(o.values.dtype == np.int8 for o in outs)


def test_layerwise_error_bound(setup):
    """Each layer's dequantized activation stays near the ReLU float reference."""
    model, imgs, cal = setup
    q = QuantizedModel(model, cal)
    t = image_to_tensor(letterbox(imgs[1])[0])
    ref = model.deployed().forward(t, collect=True)
    got = q.forward(t, collect=True)
    for layer, r, g in zip(model.net.layers, ref, got):
        scale = q.act[layer.index].scale
        rel = np.abs(r - g).mean() / scale
        assert rel < 4, f"layer {layer.index}: mean error {rel:.2f} quantization steps"


def test_heads_correlate_with_float(setup):
    model, imgs, cal = setup
    q = QuantizedModel(model, cal)
    t = image_to_tensor(letterbox(imgs[2])[0])
    for r, g in zip(model.deployed().forward(t), q.forward(t)):
        assert np.corrcoef(r.ravel(), g.ravel())[0, 1] > 0.99
