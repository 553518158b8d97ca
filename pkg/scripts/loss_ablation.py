"""Fit the same crop under each reconstruction loss and compare PSNR.

    python scripts/loss_ablation.py [--steps 10000] [--n 2000] [--image tests/data/astronaut_128.png]
"""
import argparse
import json
import time
from pathlib import Path

from gsimage.imio import read_image
from gsimage.train import TrainConfig, fit

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image", default=str(ROOT / "tests" / "data" / "astronaut_128.png"))
    ap.add_argument("--steps", type=int, default=10000)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--losses", default="l2,l1,ssim,l1+ssim")
    ap.add_argument("--out", default=None, help="optional JSON results path")
    args = ap.parse_args()
    target = read_image(args.image)
    results = {}
    for kind in args.losses.split(","):
        t0 = time.perf_counter()
        _, log = fit(target, TrainConfig(steps=args.steps, num_gaussians=args.n, loss_kind=kind, log_every=1000))
        results[kind] = {"psnr": log.final_psnr, "psnr_by_step": {r.step: r.psnr for r in log.records},
                         "seconds": time.perf_counter() - t0}
        print(f"{kind:>8}  PSNR {log.final_psnr:.3f} dB  ({results[kind]['seconds']:.0f} s)", flush=True)
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
