import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from referencing import Registry, Resource

from tubeloc import cli
from tubeloc.darknet import bundled_cfg, init_weights, parse_cfg, save_weights
from tubeloc.imgcore import DisparityImage, GrayImage, save_pfm, save_pgm
from tubeloc.stereo3d import StereoRig, intrinsics_from_hfov
from tubeloc.synth import render_tube, write_dataset

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def _schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


REGISTRY = Registry().with_resources(
    (f"{n}.schema.json", Resource.from_contents(_schema(n))) for n in ("pose", "detection", "eval"))


def validate(obj, name):
    jsonschema.Draft202012Validator(_schema(name), registry=REGISTRY).validate(obj)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def lines(out):
    return [json.loads(l) for l in out.splitlines() if l.strip()]


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "tiny.weights"
    save_weights(init_weights(parse_cfg(bundled_cfg("yolov3-tiny")), seed=0), path)
    return path


@pytest.fixture
def tube_pgm(tmp_path):
    path = tmp_path / "tube.pgm"
    save_pgm(render_tube(320, 240, (160, 120), 30, 110), path)
    return path


# ---------------------------------------------------------------- exit codes

def test_no_command_is_usage(capsys):
    assert run(capsys)[0] == cli.EXIT_USAGE


def test_bad_flag_is_usage(capsys):
    code, _, err = run(capsys, "detect", "--bogus", "x.pgm")
    assert code == cli.EXIT_USAGE and "bogus" in err


def test_bad_threshold_is_usage(capsys, tube_pgm, weights):
    assert run(capsys, "detect", tube_pgm, "--weights", weights, "--nms-iou", "0")[0] == cli.EXIT_USAGE


def test_missing_weights_names_path(capsys, tube_pgm, tmp_path):
    missing = tmp_path / "nope.weights"
    code, _, err = run(capsys, "detect", tube_pgm, "--weights", missing)
    assert code == cli.EXIT_DATA and str(missing) in err


def test_stage_failure_on_blank_sand(capsys, tmp_path):
    path = tmp_path / "sand.pgm"
    save_pgm(GrayImage(np.full((120, 160), 95, np.uint8)), path)
    code, out, err = run(capsys, "pose", path, "--box", "40,30,80,60")
    assert code == cli.EXIT_STAGE and out == "" and "[contours]" in err


# ------------------------------------------------------------------- detect

def test_detect_black_image_prints_nothing(capsys, tmp_path, weights):
    path = tmp_path / "black.pgm"
    save_pgm(GrayImage(np.zeros((240, 320), np.uint8)), path)
    assert run(capsys, "detect", path, "--weights", weights) == (0, "", "")


def test_detect_lines_follow_schema(capsys, tube_pgm, weights):
    code, out, _ = run(capsys, "detect", tube_pgm, tube_pgm, "--weights", weights, "--conf", "0.05",
                       "--jobs", "2")
    rows = lines(out)
    assert code == 0 and rows
    for r in rows:
        validate(r, "detection")
    confs = [r["confidence"] for r in rows]
    half = len(rows) // 2
    assert confs[:half] == confs[half:]  # both copies, in input order


def test_detect_continues_past_bad_file(capsys, tube_pgm, weights, tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0\n")
    code, out, err = run(capsys, "detect", bad, tube_pgm, "--weights", weights, "--conf", "0.05")
    assert code == cli.EXIT_DATA and "bad.pgm" in err and lines(out)


# --------------------------------------------------------------------- pose

def test_pose_box_output(capsys, tube_pgm, tmp_path):
    code, out, _ = run(capsys, "pose", tube_pgm, "--box", "90,70,140,100", "--debug", "--out", tmp_path)
    (pose,) = lines(out)
    validate(pose, "pose")
    d = abs(pose["orientation_deg"] - 30) % 180
    assert code == 0 and min(d, 180 - d) < 2
    assert (tmp_path / "debug" / "tube" / "mask.pgm").exists()


def test_pose_auto_matches_box(capsys, tube_pgm, weights):
    _, out, _ = run(capsys, "detect", tube_pgm, "--weights", weights, "--conf", "0.05")
    top = lines(out)[0]
    box = ",".join(repr(v) for v in top["box"])
    a = run(capsys, "pose", tube_pgm, "--auto", "--weights", weights, "--conf", "0.05")
    b = run(capsys, "pose", tube_pgm, "--box", box)
    assert a[0] == b[0]
    assert a[1] == b[1]


def test_pose_needs_box_or_auto(capsys, tube_pgm):
    assert run(capsys, "pose", tube_pgm)[0] == cli.EXIT_USAGE


# --------------------------------------------------------------- localize

def _nadir_rig_file(tmp_path, height=1.0):
    rig = StereoRig(intrinsics_from_hfov(640, 480, 66.0), 0.12, np.diag([1.0, -1.0, -1.0]), [0, 0, height], 0.15)
    path = tmp_path / "rig.txt"
    path.write_text(rig.to_text())
    return rig, path


def test_localize_tube_on_flat_ground(capsys, tmp_path):
    rig, rig_path = _nadir_rig_file(tmp_path)
    fx = rig.intrinsics.fx
    length_px = 0.15 * fx
    img = render_tube(640, 480, (320, 240), 30, length_px)
    save_pgm(img, tmp_path / "f.pgm")
    save_pfm(DisparityImage(np.full((480, 640), fx * 0.12, np.float32)), tmp_path / "f.pfm")
    code, out, _ = run(capsys, "localize", tmp_path / "f.pgm", tmp_path / "f.pfm", "--rig", rig_path,
                       "--box", "230,170,180,140", "--dem", tmp_path / "dem.csv")
    (res,) = lines(out)
    validate(res, "localize")
    assert code == 0 and res["detection"]["source"] == "manual" and res["detection"]["confidence"] is None
    p3 = res["pose_3d"]
    assert np.linalg.norm(p3["centroid_m"]) < 0.01
    assert abs(p3["length_m"] - 0.15) < 0.01
    assert abs(p3["yaw_deg"] - 150) < 2  # image y points down, world y up
    assert (tmp_path / "dem.csv").exists()


def test_localize_without_depth(capsys, tmp_path, tube_pgm):
    save_pfm(DisparityImage(np.full((240, 320), -1.0, np.float32)), tmp_path / "d.pfm")
    code, _, err = run(capsys, "localize", tube_pgm, tmp_path / "d.pfm", "--box", "90,70,140,100")
    assert code == cli.EXIT_STAGE and "[lift]" in err


def test_localize_size_mismatch(capsys, tmp_path, tube_pgm):
    save_pfm(DisparityImage(np.ones((10, 10), np.float32)), tmp_path / "d.pfm")
    assert run(capsys, "localize", tube_pgm, tmp_path / "d.pfm", "--box", "1,1,5,5")[0] == cli.EXIT_DATA


# ------------------------------------------------------ quantize, transplant

def test_quantize_is_deterministic(capsys, tmp_path, weights, tube_pgm):
    calib = tmp_path / "calib"
    calib.mkdir()
    (calib / "a.pgm").write_bytes(tube_pgm.read_bytes())
    for out in ("q1", "q2"):
        assert run(capsys, "quantize", calib, "-o", tmp_path / out, "--weights", weights)[0] == 0
    a, b = (tmp_path / q / "tiny.calib" for q in ("q1", "q2"))
    assert a.read_bytes() == b.read_bytes()
    code, out, _ = run(capsys, "detect", tube_pgm, "--weights", tmp_path / "q1" / "tiny.weights",
                       "--calibration", a, "--conf", "0.05")
    assert code == 0
    for r in lines(out):
        validate(r, "detection")


def test_quantize_missing_cfg(capsys, tmp_path, weights):
    code, _, err = run(capsys, "quantize", tmp_path, "-o", tmp_path / "q", "--weights", weights,
                       "--cfg", tmp_path / "nope.cfg")
    assert code == cli.EXIT_DATA and "nope.cfg" in err


def test_transplant_cutoff_zero_is_identity(capsys, tmp_path, weights):
    other = tmp_path / "other.weights"
    save_weights(init_weights(parse_cfg(bundled_cfg("yolov3-tiny")), seed=7), other)
    assert run(capsys, "transplant", weights, other, "-o", tmp_path / "o.weights", "--cutoff", "0")[0] == 0
    assert (tmp_path / "o.weights").read_bytes() == other.read_bytes()
    assert run(capsys, "transplant", weights, other, "-o", tmp_path / "p.weights")[0] == 0
    assert (tmp_path / "p.weights").read_bytes() != other.read_bytes()


def test_transplant_incompatible(capsys, tmp_path, weights):
    full = tmp_path / "full.weights"
    save_weights(init_weights(parse_cfg(bundled_cfg("yolov3")), seed=0), full)
    code, _, err = run(capsys, "transplant", full, weights, "-o", tmp_path / "x.weights",
                       "--source-cfg", "yolov3")
    assert code == cli.EXIT_DATA and "layer" in err


# -------------------------------------------------------------- eval, bench

def test_eval_dataset(capsys, tmp_path, weights):
    write_dataset(tmp_path / "ds", n_images=2, negatives=1, width=320, height=240)
    code, out, _ = run(capsys, "eval", tmp_path / "ds", "--weights", weights, "--out", tmp_path / "o",
                       "--pose")
    assert code == 0 and out.splitlines()[1].startswith("True Positives")
    validate(json.loads((tmp_path / "o" / "eval.json").read_text()), "eval")
    stats = json.loads((tmp_path / "o" / "orientation.json").read_text())["stats"]
    assert stats["n"] == 2


def test_eval_empty_dataset(capsys, tmp_path, weights):
    (tmp_path / "images").mkdir()
    code, _, err = run(capsys, "eval", tmp_path, "--weights", weights)
    assert code == cli.EXIT_DATA and "no .pgm images" in err


def test_bench_reports_ratio(capsys, tmp_path, tube_pgm):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    (imgs / "a.pgm").write_bytes(tube_pgm.read_bytes())
    code, out, _ = run(capsys, "bench", "yolov3-tiny", "yolov3-tiny,,auto", "--images", imgs,
                       "--warmup", "1", "--iters", "10", "--out", tmp_path / "b")
    assert code == 0 and "float" in out and "int8" in out
    rows = json.loads((tmp_path / "b" / "bench.json").read_text())["rows"]
    assert [r["path"] for r in rows] == ["float", "int8"]


# ------------------------------------------------------------------ config

def test_config_file_env_and_flag(capsys, tmp_path, tube_pgm, weights, monkeypatch):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[model]\nweights = {weights.name}\n[thresholds]\nconf = 0.05\n")
    (tmp_path / weights.name).write_bytes(weights.read_bytes())
    _, base, _ = run(capsys, "detect", tube_pgm, "--config", ini)
    assert lines(base)  # relative weights resolved against the ini's folder
    monkeypatch.setenv(cli.CONFIG_ENV, str(ini))
    assert run(capsys, "detect", tube_pgm)[1] == base
    assert run(capsys, "detect", tube_pgm, "--conf", "0.99")[1] == ""


def test_config_unknown_key(capsys, tmp_path, tube_pgm):
    ini = tmp_path / "bad.ini"
    ini.write_text("[model]\nweigths = x\n")
    code, _, err = run(capsys, "detect", tube_pgm, "--config", ini)
    assert code == cli.EXIT_USAGE and "weigths" in err
