"""Command-line frontend: ``tubeloc <command> ...``.

Settings come from an INI file (``--config``, else ``$TUBELOC_CONFIG``);
flags override it. Exit codes: 0 success, 1 usage, 2 data or parse error,
3 pipeline-stage failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import DataError, StageError, TubelocError

CONFIG_ENV = "TUBELOC_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, StageError):
        return EXIT_STAGE
    return EXIT_DATA


def _err(msg: str) -> None:
    print(f"tubeloc: error: {msg}", file=sys.stderr)


@dataclass
class RunConfig:
    cfg: str = "yolov3-tiny"
    weights: str | None = None
    calibration: str | None = None
    rig: str | None = None
    conf: float = 0.75
    nms_iou: float = 0.45
    match_iou: float = 0.5
    block: int = 15
    offset: float = 5.0
    dem_cell: float = 0.02
    out: str | None = None
    debug: bool = False
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    FIELDS = {  # ini section.key -> attribute
        "model.cfg": "cfg", "model.weights": "weights", "model.calibration": "calibration",
        "rig.path": "rig", "thresholds.conf": "conf", "thresholds.nms_iou": "nms_iou",
        "thresholds.match_iou": "match_iou", "pose.block": "block", "pose.offset": "offset",
        "dem.cell": "dem_cell", "output.dir": "out", "output.debug": "debug", "run.jobs": "jobs",
    }

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8"):
            raise DataError(f"cannot read config file {path}")
        rc = cls()
        base = os.path.dirname(os.path.abspath(path))
        for section in cp.sections():
            for key, value in cp.items(section):
                attr = cls.FIELDS.get(f"{section}.{key}")
                if attr is None:
                    raise UsageError(f"{path}: unknown setting [{section}] {key}")
                current = getattr(rc, attr)
                if attr in ("cfg", "weights", "calibration", "rig", "out"):
                    if attr == "cfg" and os.sep not in value and not value.endswith(".cfg"):
                        setattr(rc, attr, value)
                    else:
                        setattr(rc, attr, os.path.join(base, value))
                elif isinstance(current, bool):
                    setattr(rc, attr, cp.getboolean(section, key))
                else:
                    try:
                        setattr(rc, attr, type(current)(value))
                    except ValueError:
                        raise UsageError(f"{path}: [{section}] {key} = {value!r} is not a number") from None
        return rc

    def override(self, args) -> "RunConfig":
        for attr in ("cfg", "weights", "calibration", "rig", "conf", "nms_iou", "match_iou", "block",
                     "offset", "dem_cell", "out", "jobs"):
            v = getattr(args, attr, None)
            if v is not None:
                setattr(self, attr, v)
        if getattr(args, "debug", None):
            self.debug = True
        return self

    def validate(self) -> "RunConfig":
        if self.conf < 0:
            raise UsageError(f"confidence threshold must be non-negative, got {self.conf}")
        for name in ("nms_iou", "match_iou"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise UsageError(f"{name} must be in (0, 1], got {v}")
        if self.block < 3 or self.block % 2 == 0:
            raise UsageError(f"block must be odd and at least 3, got {self.block}")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")
        if self.dem_cell <= 0:
            raise UsageError("DEM cell size must be positive")
        return self

    def cfg_path(self) -> str:
        from .darknet import bundled_cfg_path

        if os.path.exists(self.cfg):
            return self.cfg
        if not self.cfg.endswith(".cfg") and os.sep not in self.cfg:
            try:
                return bundled_cfg_path(self.cfg)
            except (FileNotFoundError, OSError):
                pass
        raise DataError(f"cfg file not found: {self.cfg}")


def _require_file(path, what):
    if path is None:
        raise UsageError(f"no {what} given")
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")
    return path


def load_model(rc: RunConfig):
    from .nnexec import Calibration, Model, QuantizedModel

    cfg = rc.cfg_path()
    weights = _require_file(rc.weights, "weights file")
    model = Model.load(cfg, weights, name=os.path.splitext(os.path.basename(weights))[0])
    if rc.calibration:
        return QuantizedModel(model, Calibration.load(_require_file(rc.calibration, "calibration file")))
    return model


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")


def _run_many(items, fn, jobs):
    """Apply ``fn`` to every item, collecting (item, result | exception) in order."""
    def safe(item):
        try:
            return item, fn(item)
        except (TubelocError, OSError, UsageError) as exc:
            return item, exc

    if jobs <= 1:
        return [safe(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(safe, items))


def _parse_box(text):
    from .imgcore import BoundingBox

    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--box expects x,y,w,h, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise UsageError("--box width and height must be positive")
    return BoundingBox(x, y, w, h)


def _parse_point(text, flag):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects x,y, got {text!r}") from None
    return x, y


# -------------------------------------------------------------------- commands

def cmd_detect(args, rc) -> int:
    from .imgcore import load_pgm
    from .nnexec import detect

    model = load_model(rc)

    def one(path):
        return detect(model, load_pgm(path), rc.conf, rc.nms_iou)

    code = EXIT_OK
    for path, res in _run_many(args.images, one, rc.jobs):
        if isinstance(res, Exception):
            _err(f"{path}: {res}")
            code = max(code, exit_code_for(res))
            continue
        for det in res:
            _emit(det.to_json(path))
    return code


def _pose_for(image, path, rc, box, centroid, debug_dir):
    from .imgcore import crop
    from .posecv import estimate_pose_2d

    region = crop(image, box)
    cen = centroid or box.center
    local = (cen[0] - region.origin[0], cen[1] - region.origin[1])
    return estimate_pose_2d(region, local, rc.block, rc.offset, debug_dir=debug_dir)


def _auto_box(model, image, rc):
    from .errors import EmptyDetectionError
    from .nnexec import detect

    dets = detect(model, image, rc.conf, rc.nms_iou)
    if not dets:
        raise EmptyDetectionError(f"no detection above confidence {rc.conf}")
    return dets[0]


def cmd_pose(args, rc) -> int:
    from .imgcore import load_pgm

    image = load_pgm(args.image)
    if args.box:
        box = _parse_box(args.box)
    else:
        box = _auto_box(load_model(rc), image, rc).box
    centroid = _parse_point(args.centroid, "--centroid") if args.centroid else None
    debug_dir = None
    if rc.debug:
        debug_dir = os.path.join(rc.out or ".", "debug", os.path.splitext(os.path.basename(args.image))[0])
    pose = _pose_for(image, args.image, rc, box, centroid, debug_dir)
    _emit(pose.to_json(args.image))
    return EXIT_OK


def load_rig(rc, width, height):
    from .stereo3d import StereoRig, intrinsics_from_hfov

    if rc.rig:
        return StereoRig.from_file(_require_file(rc.rig, "rig file"))
    return StereoRig(intrinsics_from_hfov(width, height, 66.0))


def cmd_localize(args, rc) -> int:
    from .imgcore import load_pfm, load_pgm
    from .stereo3d import build_dem, lift_pose_to_3d

    image = load_pgm(args.image)
    disparity = load_pfm(args.disparity)
    if (disparity.width, disparity.height) != (image.width, image.height):
        raise DataError(f"disparity {disparity.width}x{disparity.height} does not match image "
                        f"{image.width}x{image.height}")
    rig = load_rig(rc, image.width, image.height)
    if args.box:
        box = _parse_box(args.box)
        detection = {"box": box.as_list(), "confidence": None, "source": "manual"}
    else:
        det = _auto_box(load_model(rc), image, rc)
        box = det.box
        detection = {"box": box.as_list(), "confidence": det.confidence, "source": "detector"}
    pose2d = _pose_for(image, args.image, rc, box, None, None)
    pose3d = lift_pose_to_3d(pose2d, disparity, rig)
    if args.dem:
        dem = build_dem(disparity, image, rig, rc.dem_cell)
        if args.dem.endswith(".csv"):
            dem.to_csv(args.dem)
        else:
            dem.to_pgm(args.dem)
    out = {"image": args.image, "detection": detection, "pose_2d": pose2d.to_json(args.image),
           "pose_3d": pose3d.to_json(args.image)}
    _emit(out)
    return EXIT_OK


def _list_images(directory):
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".pgm"))
    if not names:
        raise DataError(f"no .pgm images in {directory}")
    return [os.path.join(directory, n) for n in names]


def cmd_quantize(args, rc) -> int:
    from .imgcore import load_pgm
    from .nnexec import Model, calibrate

    cfg = rc.cfg_path()
    weights = _require_file(rc.weights, "weights file")
    images = [load_pgm(p) for p in _list_images(args.calib_dir)]
    model = Model.load(cfg, weights)
    cal = calibrate(model, images)
    out = args.output
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(weights))[0]
    shutil.copyfile(cfg, os.path.join(out, stem + ".cfg"))
    shutil.copyfile(weights, os.path.join(out, stem + ".weights"))
    cal.save(os.path.join(out, stem + ".calib"))
    for name, p in cal.items():
        print(f"{name:<10} scale={p.scale:.6g} zero_point={p.zero_point}")
    return EXIT_OK


def cmd_transplant(args, rc) -> int:
    from .darknet import TransplantPlan, load_cfg, load_weights, save_weights, transplant_backbone

    dest_net = load_cfg(rc.cfg_path())
    src_net = load_cfg(RunConfig(cfg=args.source_cfg).cfg_path()) if args.source_cfg else dest_net
    src = load_weights(_require_file(args.source, "source weights"), src_net)
    dest = load_weights(_require_file(args.dest, "destination weights"), dest_net)
    cutoff = dest_net.default_cutoff() if args.cutoff is None else args.cutoff
    out = transplant_backbone(src, dest, TransplantPlan(cutoff, args.source, args.dest))
    save_weights(out, args.output)
    print(f"transplanted {sum(1 for i in dest.layers if i < cutoff)} layers below cutoff {cutoff}")
    return EXIT_OK


def cmd_eval(args, rc) -> int:
    from .evalbench import load_dataset, run_eval, run_pose_eval

    samples = load_dataset(args.dataset)
    model = load_model(rc)
    out = rc.out or "."
    res = run_eval(model, samples, rc.conf, rc.match_iou, rc.nms_iou, out_dir=out)
    with open(os.path.join(out, "eval.txt")) as fh:
        sys.stdout.write(fh.read())
    if args.pose:
        stats, failures = run_pose_eval(samples, rc.block, rc.offset)
        with open(os.path.join(out, "orientation.json"), "w") as fh:
            json.dump({"stats": stats.to_json(), "failures": failures}, fh, indent=2)
        print(f"orientation error {stats.mean:.2f} +/- {stats.std:.2f} deg, "
              f"{100 * stats.frac_under_5:.1f}% under 5 deg")
    for e in res.errors:
        _err(f"{e['image']}: {e['error']}")
    return EXIT_DATA if res.errors else EXIT_OK


def _bench_model(spec):
    """``CFG[,WEIGHTS[,CALIB]]``. Without weights a seeded random init is timed."""
    from .darknet import init_weights, load_cfg, load_weights
    from .nnexec import Calibration, Model, QuantizedModel, calibrate

    parts = spec.split(",")
    rc = RunConfig(cfg=parts[0])
    net = load_cfg(rc.cfg_path())
    name = os.path.splitext(os.path.basename(parts[0]))[0]
    if len(parts) > 1 and parts[1]:
        weights = load_weights(_require_file(parts[1], "weights file"), net)
    else:
        weights = init_weights(net, seed=0)
    model = Model(net, weights, name=name)
    if len(parts) > 2:
        cal = Calibration.load(_require_file(parts[2], "calibration file")) if parts[2] != "auto" else None
        return QuantizedModel(model, cal or calibrate(model, [_zero_tensor(net)]))
    return model


def _zero_tensor(net):
    import numpy as np

    return np.zeros((net.channels, net.height, net.width), dtype=np.float32)


def cmd_bench(args, rc) -> int:
    from threadpoolctl import threadpool_limits

    from .evalbench import BenchReport, bench_inference
    from .imgcore import load_pgm

    images = [load_pgm(p) for p in _list_images(args.images)]
    models = [_bench_model(s) for s in args.models]
    report = BenchReport()
    with threadpool_limits(limits=1):
        for m in models:
            bench_inference(m, images, args.warmup, args.iters, report)
    text = report.to_text()
    sys.stdout.write(text)
    if rc.out:
        os.makedirs(rc.out, exist_ok=True)
        with open(os.path.join(rc.out, "bench.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
        with open(os.path.join(rc.out, "bench.txt"), "w") as fh:
            fh.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tubeloc", description="Sample-tube detection and localisation.")
    p.add_argument("--config", help=f"INI settings file (default: ${CONFIG_ENV})")
    # also accepted after the subcommand; SUPPRESS keeps it from clobbering the top-level value
    shared = _Parser(add_help=False)
    shared.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[shared], **k)

    def common(sp, model=True):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, help="images processed concurrently")
        if model:
            sp.add_argument("--cfg", help="network cfg path or bundled name")
            sp.add_argument("--weights", help="Darknet weights file")
            sp.add_argument("--calibration", help="int8 calibration sidecar; selects the integer path")
            sp.add_argument("--conf", type=float, help="confidence threshold (default 0.75)")
            sp.add_argument("--nms-iou", dest="nms_iou", type=float, help="NMS IoU (default 0.45)")

    def pose_opts(sp):
        sp.add_argument("--block", type=int, help="adaptive threshold block size (default 15)")
        sp.add_argument("--offset", type=float, help="adaptive threshold offset (default 5)")

    sp = sub.add_parser("detect", help="detect tubes, one JSON line per detection")
    sp.add_argument("images", nargs="+")
    common(sp)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("pose", help="image-plane pose of a tube")
    sp.add_argument("image")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--box", help="x,y,w,h region in image pixels")
    g.add_argument("--auto", action="store_true", help="use the top detection as the region")
    sp.add_argument("--centroid", help="x,y prior centroid (default: box centre)")
    sp.add_argument("--debug", action="store_true", help="write stage images under OUT/debug/")
    common(sp)
    pose_opts(sp)
    sp.set_defaults(func=cmd_pose)

    sp = sub.add_parser("localize", help="detect, estimate pose and lift to 3-D")
    sp.add_argument("image")
    sp.add_argument("disparity", help="PFM disparity aligned with the image")
    sp.add_argument("--rig", help="stereo rig file")
    sp.add_argument("--box", help="x,y,w,h region instead of running the detector")
    sp.add_argument("--dem", help="also write a DEM (.csv or .pgm)")
    sp.add_argument("--dem-cell", dest="dem_cell", type=float, help="DEM cell size in metres (default 0.02)")
    common(sp)
    pose_opts(sp)
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("quantize", help="calibrate an int8 model")
    sp.add_argument("calib_dir", help="directory of calibration .pgm images")
    sp.add_argument("-o", "--output", required=True, help="output directory")
    sp.add_argument("--cfg")
    sp.add_argument("--weights")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("transplant", help="copy backbone layers between weight files")
    sp.add_argument("source", help="weights providing the backbone")
    sp.add_argument("dest", help="weights receiving it")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--cfg", help="destination cfg (default yolov3-tiny)")
    sp.add_argument("--source-cfg", dest="source_cfg", help="source cfg if different")
    sp.add_argument("--cutoff", type=int, help="first layer kept from dest (default: first route layer)")
    sp.set_defaults(func=cmd_transplant)

    sp = sub.add_parser("eval", help="confusion counts over a labelled dataset")
    sp.add_argument("dataset")
    sp.add_argument("--iou", dest="match_iou", type=float, help="match IoU (default 0.5)")
    sp.add_argument("--pose", action="store_true", help="also score orientation against poses/")
    common(sp)
    pose_opts(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time single-image inference")
    sp.add_argument("models", nargs="+", help="CFG[,WEIGHTS[,CALIB|auto]]")
    sp.add_argument("--images", required=True, help="directory of .pgm images")
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        path = args.config or os.environ.get(CONFIG_ENV)
        rc = RunConfig.from_ini(path) if path else RunConfig()
        rc = rc.override(args).validate()
        return args.func(args, rc)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (TubelocError, OSError) as exc:
        _err(str(exc))
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
