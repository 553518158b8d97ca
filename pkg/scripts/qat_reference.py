"""Reference run for the quantization pipeline: float fit, post-training quantization, QAT.

Also reports which attribute the quality loss comes from by quantizing covariances
and colors separately.
"""
import argparse
import json
from pathlib import Path

from gsimage.core import covariances_from_raw
from gsimage.imio import read_image
from gsimage.metrics import psnr
from gsimage.quant import AsymQuant, QatConfig, init_rvq, qat_finetune, quantize_asym, quantize_cloud, rvq_encode_batch
from gsimage.raster import render_splats
from gsimage.train import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--image", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "astronaut_128.png"))
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=10000)
    ap.add_argument("--qat-steps", type=int, default=10000)
    ap.add_argument("--out", help="optional JSON results path")
    args = ap.parse_args()

    target = read_image(args.image)
    h, w = target.shape[:2]
    cloud, log = fit(target, TrainConfig(steps=args.steps, num_gaussians=args.n, log_every=1000))

    def score(cov_raw, colors):
        return psnr(render_splats(cloud.centers(), covariances_from_raw(cov_raw, cloud.kind), colors, w, h), target)

    res = {"float": log.final_psnr, "ptq": psnr(quantize_cloud(cloud).render(), target)}
    _, deq = quantize_asym(cloud.cov_raw, AsymQuant.from_range(cloud.cov_raw, 6))
    res["cov_only"] = score(deq, cloud.color_w)
    for stages, size in [(2, 8), (2, 16), (4, 8), (2, 64)]:
        book = init_rvq(cloud.color_w, stages, size)
        _, rec, _ = rvq_encode_batch(cloud.color_w, book.codebooks)
        res[f"color_only_M{stages}_B{size}"] = score(cloud.cov_raw, rec)
    _, qlog = qat_finetune(cloud, target, QatConfig(steps=args.qat_steps))
    res["qat"] = qlog.post_psnr
    for k, v in res.items():
        print(f"{k:>20s}  {v:7.3f} dB")
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=2) + "\n")


if __name__ == "__main__":
    main()
