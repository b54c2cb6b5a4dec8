"""Float and int8 detection side by side.

Uses the offline surrogate detector (see demos/train_surrogate.py), calibrates
the 8-bit path on a handful of rendered frames and compares the boxes.

    python3 demos/detect_int8.py
"""
import sys
from pathlib import Path

from tubeloc.imgcore import iou
from tubeloc.nnexec import calibrate, detect, quantize_network
from tubeloc.synth import render_scene

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from surrogate import surrogate_detector  # noqa: E402

model = surrogate_detector()
scenes = [render_scene(seed=40_000 + k) for k in range(8)]
int8 = quantize_network(model, calibrate(model, [s.image for s in scenes[:4]]))

for sc in scenes[4:]:
    f = detect(model, sc.image)
    q = detect(int8, sc.image)
    print(f"truth  {[round(v) for v in sc.box.as_list()]}")
    for d in f:
        best = max((iou(d.box, e.box) for e in q), default=0.0)
        print(f"  float {[round(v) for v in d.box.as_list()]} conf {d.confidence:.2f}  "
              f"iou(truth) {iou(d.box, sc.box):.2f}  best int8 iou {best:.2f}")
    for d in q:
        print(f"  int8  {[round(v) for v in d.box.as_list()]} conf {d.confidence:.2f}")
