"""Fit the offline surrogate detector used by the parity tests.

The published tube detector is not reachable from an offline build, so this
script trains a stand-in on rendered sand scenes. The YOLOv3-tiny backbone
(layers 0-12) keeps its seeded random initialisation and is never updated;
only the six convolutions after it are trained, with PyTorch. Activations are
ReLU throughout so the float network is the one int8 emulation targets.

    python3 demos/train_surrogate.py --out tests/fixtures/surrogate_heads.npz

Requires ``torch`` (not a package dependency). Takes about 20 minutes on one
CPU core, most of it in the two 3x3 layers.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from tubeloc.darknet import fold_batchnorm, init_weights, parse_cfg
from tubeloc.imgcore import letterbox
from tubeloc.nnexec import Model, image_to_tensor
from tubeloc.synth import render_scene

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from surrogate import BACKBONE_SEED, surrogate_cfg  # noqa: E402

TRAINED = (13, 14, 15, 18, 21, 22)
NET = parse_cfg(surrogate_cfg())
ANCHORS = np.array(NET.layers[16].anchors, float)
MASKS = [NET.layers[16].mask, NET.layers[23].mask]
# head logits and hidden activations beyond this are penalised, so one int8 scale per tensor stays fine
RANGE_LIMIT = 8.0
RANGE_WEIGHT = 0.1


def cache_features(n, seed):
    """Backbone outputs at layers 8 and 12 plus the network-frame box (NaN when empty)."""
    model = Model(NET, init_weights(NET, seed=BACKBONE_SEED))
    f8 = np.zeros((n, 256, 26, 26), np.float16)
    f12 = np.zeros((n, 1024, 13, 13), np.float16)
    boxes = np.full((n, 4), np.nan)
    for k in range(n):
        sc = render_scene(seed=seed + k, tube=k % 6 != 0)
        boxed, tf = letterbox(sc.image)
        outs = model.forward(image_to_tensor(boxed), collect=True, stop=13)
        f8[k], f12[k] = outs[8], outs[12]
        if k % 6:
            x1, y1 = tf.to_network(sc.box.x, sc.box.y)
            x2, y2 = tf.to_network(sc.box.x2, sc.box.y2)
            boxes[k] = [x1, y1, x2 - x1, y2 - y1]
    return f8, f12, boxes


def build_targets(boxes, grid, mask):
    n = len(boxes)
    obj = np.zeros((n, 3, grid, grid), np.float32)
    reg = np.zeros((n, 3, 4, grid, grid), np.float32)
    for k, (x, y, w, h) in enumerate(boxes):
        if np.isnan(x):
            continue
        inter = np.minimum(w, ANCHORS[:, 0]) * np.minimum(h, ANCHORS[:, 1])
        best = int(np.argmax(inter / (w * h + ANCHORS.prod(1) - inter)))
        if best not in mask:
            continue
        a, stride = mask.index(best), 416 / grid
        cx, cy = x + w / 2, y + h / 2
        j, i = int(cx // stride), int(cy // stride)
        obj[k, a, i, j] = 1
        reg[k, a, :, i, j] = [cx / stride - j, cy / stride - i, np.log(w / ANCHORS[best][0]),
                              np.log(h / ANCHORS[best][1])]
    return obj, reg


def train(f8, f12, boxes, epochs, lr, log):
    import torch
    import torch.nn as nn
    import torch.nn.functional as F

    torch.manual_seed(0)
    store = init_weights(NET, seed=BACKBONE_SEED)

    def conv(idx):
        fw = fold_batchnorm(store.layers[idx])
        o, i, k, _ = fw.weights.shape
        c = nn.Conv2d(i, o, k, padding=k // 2)
        c.weight.data = torch.tensor(np.asarray(fw.weights, np.float32))
        c.bias.data = torch.tensor(np.asarray(fw.biases, np.float32))
        return c

    class Heads(nn.Module):
        def __init__(self):
            super().__init__()
            self.c = nn.ModuleDict({str(i): conv(i) for i in TRAINED})
            # output convs start near zero; a random init leaves background logits near -100,
            # which no per-tensor int8 scale can share with the box channels
            for key in ("15", "22"):
                nn.init.normal_(self.c[key].weight, std=0.01)
                nn.init.zeros_(self.c[key].bias)

        def forward(self, x12, x8):
            a = F.relu(self.c["13"](x12))
            m1 = F.relu(self.c["14"](a))
            b = F.interpolate(F.relu(self.c["18"](a)), scale_factor=2, mode="nearest")
            m2 = F.relu(self.c["21"](torch.cat([b, x8], 1)))
            h1, h2 = self.c["15"](m1), self.c["22"](m2)
            spill = sum((F.relu(t.abs() - RANGE_LIMIT) ** 2).mean() for t in (a, m1, m2, h1, h2))
            return h1, h2, spill

    def head_loss(h, obj, reg):
        n, _, g, _ = h.shape
        h = h.view(n, 3, 6, g, g)
        loss = F.binary_cross_entropy_with_logits(h[:, :, 4], obj, pos_weight=torch.tensor(20.0))
        pos = obj > 0
        if pos.any():
            hp, tp = h.permute(0, 1, 3, 4, 2)[pos], reg.permute(0, 1, 3, 4, 2)[pos]
            loss = loss + F.binary_cross_entropy_with_logits(hp[:, :2], tp[:, :2]) + F.mse_loss(hp[:, 2:4], tp[:, 2:4])
            loss = loss + F.binary_cross_entropy_with_logits(hp[:, 5], torch.ones(len(hp)))
        return loss

    x8 = torch.tensor(f8.astype(np.float32))
    x12 = torch.tensor(f12.astype(np.float32))
    t13 = [torch.tensor(a) for a in build_targets(boxes, 13, MASKS[0])]
    t26 = [torch.tensor(a) for a in build_targets(boxes, 26, MASKS[1])]
    model = Heads()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    t0 = time.time()
    for ep in range(epochs):
        perm = torch.randperm(len(boxes))
        total = 0.0
        for s in range(0, len(perm), 8):
            idx = perm[s:s + 8]
            h1, h2, spill = model(x12[idx], x8[idx])
            loss = head_loss(h1, t13[0][idx], t13[1][idx]) + head_loss(h2, t26[0][idx], t26[1][idx])
            loss = loss + RANGE_WEIGHT * spill
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        log(f"epoch {ep + 1}/{epochs} loss {total:.2f} ({time.time() - t0:.0f} s)")
    out = {}
    for key, c in model.c.items():
        out[f"w{key}"] = c.weight.detach().numpy().astype(np.float16)
        out[f"b{key}"] = c.bias.detach().numpy().astype(np.float16)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tests/fixtures/surrogate_heads.npz")
    ap.add_argument("--scenes", type=int, default=360)
    ap.add_argument("--seed", type=int, default=10_000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args(argv)
    log = lambda msg: print(msg, flush=True)
    log(f"rendering {args.scenes} scenes and caching backbone features")
    f8, f12, boxes = cache_features(args.scenes, args.seed)
    params = train(f8, f12, boxes, args.epochs, args.lr, log)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    np.savez(args.out, **params)
    log(f"wrote {args.out}")


if __name__ == "__main__":
    main()
