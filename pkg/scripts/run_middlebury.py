#!/usr/bin/env python3
"""Indicative public-data check on Middlebury-style scenes.

Expects --data to hold scene subdirectories, each with im0.png, im1.png,
and disp0.pfm (ground-truth disparity for the left view). Images and ground
truth are block-averaged down by --scale (disparities divided accordingly),
the model is trained jointly on the first --scenes pairs, and the pooled
4-point / 2-point errors of the final pseudo ground truth are reported next
to the published reference values (4-PE 18.054, 2-PE 22.526). The soft pass
line is 4-PE <= 30%. Runtime is hours at full epoch counts; this check is
excluded from CI.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

import selfstereo as ss
from selfstereo.imgio import DisparityMap, load_gray, read_pfm
from selfstereo.postproc import completion
from selfstereo.trainer import TrainConfig

REFERENCE_PE4 = 18.054
REFERENCE_PE2 = 22.526


def block_mean(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // scale * scale, w // scale * scale
    return img[:h2, :w2].reshape(h2 // scale, scale, w2 // scale, scale).mean(axis=(1, 3))


def downsample_gt(gt: DisparityMap, scale: int) -> DisparityMap:
    values = gt.values[::scale, ::scale] / scale
    valid = gt.valid[::scale, ::scale]
    h = gt.height // scale
    w = gt.width // scale
    return DisparityMap(values[:h, :w], valid[:h, :w])


def run_check(data_dir: Path, max_scenes: int = 3, max_epochs: int = 60, scale: int = 4, dmax: int = 64, seed: int = 0):
    scene_dirs = sorted(d for d in data_dir.iterdir() if (d / "im0.png").exists())[:max_scenes]
    if not scene_dirs:
        raise SystemExit(f"no scenes with im0.png found under {data_dir}")
    pairs = []
    gts = []
    for scene in scene_dirs:
        left = block_mean(load_gray(scene / "im0.png"), scale).astype(np.float32)
        right = block_mean(load_gray(scene / "im1.png"), scale).astype(np.float32)
        gt = downsample_gt(read_pfm(scene / "disp0.pfm"), scale)
        h = min(left.shape[0], gt.height)
        w = min(left.shape[1], gt.width)
        pairs.append((left[:h, :w], right[:h, :w]))
        gts.append(DisparityMap(gt.values[:h, :w], gt.valid[:h, :w]))
        print(f"scene {scene.name}: {h}x{w} at 1/{scale} resolution")

    cfg = TrainConfig(dmax=dmax, max_epochs=max_epochs, seed=seed)
    state = ss.fit(pairs, cfg)

    def pooled(tau):
        wrong = total = 0
        for res, gt in zip(state.pseudo_gt, gts):
            both = res.sparse.valid & gt.valid
            total += int(both.sum())
            wrong += int((np.abs(gt.values[both] - res.sparse.values[both]) >= tau).sum())
        return 100.0 * wrong / max(total, 1)

    comps = [completion(res.sparse, gt) for res, gt in zip(state.pseudo_gt, gts)]
    return {
        "scenes": [d.name for d in scene_dirs],
        "epochs": state.epoch,
        "pe4": pooled(4.0),
        "pe2": pooled(2.0),
        "completion_per_scene": comps,
        "reference_pe4": REFERENCE_PE4,
        "reference_pe2": REFERENCE_PE2,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="directory of Middlebury scene folders")
    parser.add_argument("--scenes", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=300)
    parser.add_argument("--scale", type=int, default=4)
    parser.add_argument("--dmax", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    import logging

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = run_check(Path(args.data), args.scenes, args.epochs, args.scale, args.dmax, args.seed)
    print(json.dumps(result, indent=1))
    verdict = "PASS" if result["pe4"] <= 30.0 else "FAIL"
    print(f"indicative check: {verdict} (4-PE {result['pe4']:.2f}% vs soft bound 30%)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
