#!/usr/bin/env python3
"""Calibration harness: evaluate scene/training configs for the synthetic
corpus.  Not part of the package; used to pick the defaults that the studies
and the acceptance suite pin down."""
import argparse
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from opl import curriculum, imgdata, micronet, samplers  # noqa: E402
from opl.rng import RngStream, derive_seed  # noqa: E402


def run_config(tag, spec, n_scenes, budget, b, inner, lr, wd, methods, seeds=(0,)):
    tcfg = micronet.TrainConfig(learning_rate=lr, weight_decay=wd, inner_iters=inner)
    out = {}
    for name in methods:
        t0 = time.time()
        scores = []
        for idx in range(n_scenes):
            img, gt = imgdata.generate_scene(spec, idx)
            for sd in seeds:
                mseed = derive_seed(1000 + idx, sd)
                if name == "pl":
                    model = micronet.init_model(micronet.micro_a(4), mseed)
                    cfg = samplers.OracleConfig(budget, 99.5, b, "miou",
                                                seed=derive_seed(idx, sd))
                    res = samplers.pixel_labeling(img, gt, model, cfg, tcfg)
                    scores.append(res.history[-1][1])
                else:
                    fn = samplers.CLASSIC_SAMPLERS[name]
                    ss = fn(img, gt, budget, RngStream(derive_seed(idx, sd, hash(name) & 0xFFFF)))
                    ss.batch_size = b
                    mode = curriculum.ReplayMode("correct")
                    _, rep = curriculum.replay(img, gt, ss, mode, micronet.micro_a(4), mseed, tcfg)
                    scores.append(rep.miou)
        out[name] = (np.mean(scores), np.var(scores))
        print("  %s %-9s mean %6.2f var %7.2f (%.0fs)" %
              (tag, name, out[name][0], out[name][1], time.time() - t0), flush=True)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenes", type=int, default=8)
    ap.add_argument("--budget", type=int, default=21)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--inner", type=int, default=30)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--wd", type=float, default=0.5)
    ap.add_argument("--sigma", type=float, default=0.01)
    ap.add_argument("--shapes", type=str, default="1,3")
    ap.add_argument("--blend", type=float, default=0.6)
    ap.add_argument("--ring-shade", type=float, default=0.45)
    ap.add_argument("--ring-width", type=float, default=0.8)
    ap.add_argument("--min-frac", type=float, default=0.14)
    ap.add_argument("--max-frac", type=float, default=0.30)
    ap.add_argument("--methods", type=str, default="pl,random,uniform,edge,slic")
    ap.add_argument("--seeds", type=int, default=1)
    args = ap.parse_args()

    imgdata._EDGE_BLEND_PX = args.blend
    imgdata._OUTLINE_SHADE = args.ring_shade
    imgdata._OUTLINE_WIDTH_PX = args.ring_width
    imgdata._SHAPE_MIN_FRAC = args.min_frac
    imgdata._SHAPE_MAX_FRAC = args.max_frac
    lo, hi = (int(v) for v in args.shapes.split(","))
    spec = imgdata.SceneSpec(64, 64, 4, (lo, hi), args.sigma, seed=7)
    tag = "b%d i%d lr%g wd%g sig%g sh%s ring%g/%g" % (
        args.batch, args.inner, args.lr, args.wd, args.sigma, args.shapes,
        args.ring_shade, args.ring_width)
    print("== " + tag, flush=True)
    run_config(tag, spec, args.scenes, args.budget, args.batch, args.inner,
               args.lr, args.wd, args.methods.split(","), seeds=tuple(range(args.seeds)))


if __name__ == "__main__":
    main()
