"""Darknet files: parse a cfg, round-trip weights, transplant a backbone.

    python3 demos/weights_and_transplant.py [OUTDIR]
"""
import sys
import tempfile
from pathlib import Path

from tubeloc.darknet import (bundled_cfg, init_weights, load_weights, parse_cfg, save_weights,
                             serialize_weights, transplant_backbone)

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)

net = parse_cfg(bundled_cfg("yolov3-tiny"))
print(f"yolov3-tiny: {len(net.layers)} layers, {net.n_floats():,} weight floats, "
      f"heads at {[l.index for l in net.yolo_layers]}")
for layer in net.layers[:6]:
    print(f"  {layer.index:2d} {layer.kind:<13} -> {layer.out_shape}")

# the published file is unreachable offline; a seeded init has the same layout
pretrained = init_weights(net, seed=1)
save_weights(pretrained, out / "pretrained.weights")
back = load_weights(out / "pretrained.weights", net)
same = serialize_weights(back) == (out / "pretrained.weights").read_bytes()
print(f"\nwrote {out / 'pretrained.weights'} ({(out / 'pretrained.weights').stat().st_size:,} bytes), "
      f"byte-identical after reload: {same}")

fresh = init_weights(net, seed=2)
cut = net.default_cutoff()
mixed = transplant_backbone(pretrained, fresh, cut)
src = sum(mixed.layers[i].equals(pretrained.layers[i]) for i in mixed.layers)
dst = sum(mixed.layers[i].equals(fresh.layers[i]) for i in mixed.layers)
print(f"transplant at cutoff {cut}: {src} layers from the pretrained file, {dst} kept from the new one")
