"""``gsimage`` command line: fit, compress, decompress, eval, rd-sweep.

Every command writes a JSON manifest (resolved config, content hashes of
inputs and outputs, metrics). Wall-clock timings go to a sidecar
``*.timings.json`` so the manifest itself is byte-reproducible.

Exit codes:

    0  success
    2  usage error (bad flags or config file)
    3  input error (missing or unreadable image/checkpoint)
    4  numerical failure during optimization
    5  codec error (corrupt or unsupported bitstream)
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import codec
from .bitsback import expected_saving, rate_saving_bound, select_k
from .checkpoint import load_cloud, save_cloud
from .core import FactorizationKind
from .imio import ImageReadError, file_hash, read_image, write_png
from .losses import LOSS_KINDS
from .metrics import evaluate, ms_ssim, psnr
from .quant import QatConfig, qat_finetune
from .raster import RenderConfig
from .train import TrainConfig, fit, render_cloud

log = logging.getLogger("gsimage")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4
EXIT_CODEC = 5

DEFAULTS = {
    "num_gaussians": 30000,
    "steps": 50000,
    "lr": 1e-3,
    "loss": "l2",
    "factorization": "cholesky",
    "seed": 0,
    "bits": 6,
    "rvq_stages": 2,
    "codebook_size": 8,
    "qat_steps": 10000,
    "qat_lr": 1e-4,
    "bitsback": False,
    "tile_size": 16,
    "repeats": 100,
    "threads": None,
}

# keys each verb records in its manifest
_VERB_KEYS = {
    "fit": ["num_gaussians", "steps", "lr", "loss", "factorization", "seed", "tile_size"],
    "compress": ["bits", "rvq_stages", "codebook_size", "qat_steps", "qat_lr", "loss", "seed", "bitsback",
                 "tile_size"],
    "decompress": ["repeats", "tile_size"],
    "eval": [],
    "rd-sweep": ["steps", "lr", "loss", "factorization", "seed", "bits", "rvq_stages", "codebook_size",
                 "qat_steps", "qat_lr", "tile_size"],
}


class UsageError(ValueError):
    pass


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` JSON file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["loss"] not in LOSS_KINDS:
        raise UsageError(f"loss must be one of {LOSS_KINDS}")
    try:
        cfg["factorization"] = FactorizationKind.parse(cfg["factorization"]).label
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg["threads"] is None and os.environ.get("GSI_THREADS"):
        try:
            cfg["threads"] = int(os.environ["GSI_THREADS"])
        except ValueError as exc:
            raise UsageError("GSI_THREADS must be an integer") from exc
    return cfg


def apply_threads(threads) -> None:
    if threads is None:
        return
    import numba

    if threads < 1:
        raise UsageError("--threads must be >= 1")
    numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))


def train_config(cfg: dict, num_gaussians: int | None = None) -> TrainConfig:
    return TrainConfig(
        steps=cfg["steps"], lr0=cfg["lr"], loss_kind=cfg["loss"], seed=cfg["seed"],
        num_gaussians=num_gaussians or cfg["num_gaussians"], kind=cfg["factorization"], tile_size=cfg["tile_size"],
    )


def qat_config(cfg: dict) -> QatConfig:
    return QatConfig(
        steps=cfg["qat_steps"], lr=cfg["qat_lr"], bits=cfg["bits"], stages=cfg["rvq_stages"],
        codebook_size=cfg["codebook_size"], seed=cfg["seed"], loss_kind=cfg["loss"], tile_size=cfg["tile_size"],
    )


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def write_manifest(path: Path, command: str, cfg: dict, inputs: dict, outputs: dict, metrics: dict,
                   timings: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": {k: cfg[k] for k in _VERB_KEYS[command]},
        "seed": cfg["seed"],
        "inputs": {name: {"path": str(p), "hash": file_hash(p)} for name, p in inputs.items()},
        "outputs": {name: {"path": str(p), "hash": file_hash(p)} for name, p in outputs.items()},
        "metrics": _jsonable(metrics),
        "timings_file": str(_sidecar(path, ".timings.json")),
    }
    if extra:
        manifest.update(_jsonable(extra))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _sidecar(path, ".timings.json").write_text(json.dumps(_jsonable(timings), indent=2, sort_keys=True) + "\n")


def _manifest_path(args, out: Path) -> Path:
    return Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")


def cmd_fit(args, cfg: dict) -> dict:
    target = read_image(args.image)
    out = Path(args.output)
    t0 = time.perf_counter()
    cloud, train_log = fit(target, train_config(cfg))
    fit_time = time.perf_counter() - t0
    save_cloud(cloud, out)
    rendered = render_cloud(cloud, train_config(cfg))
    png = _sidecar(out, ".render.png")
    csv_path = _sidecar(out, ".log.csv")
    write_png(png, rendered)
    csv_path.write_text(train_log.to_csv())
    metrics = {"psnr": psnr(rendered, target), "ms_ssim": ms_ssim(rendered, target), "final_loss": train_log.records[-1].loss}
    write_manifest(_manifest_path(args, out), "fit", cfg, {"image": Path(args.image)},
                   {"checkpoint": out, "render": png}, metrics,
                   {"fit_s": fit_time, "log": [[r.step, r.wall_time] for r in train_log.records]})
    return metrics


def cmd_compress(args, cfg: dict) -> dict:
    cloud = load_cloud(args.checkpoint)
    target = read_image(args.image)
    if target.shape[:2] != (cloud.height, cloud.width):
        raise ImageReadError(f"image is {target.shape[1]}x{target.shape[0]}, checkpoint is {cloud.width}x{cloud.height}")
    out = Path(args.output)
    t0 = time.perf_counter()
    qc, qlog = qat_finetune(cloud, target, qat_config(cfg))
    qat_time = time.perf_counter() - t0
    t0 = time.perf_counter()
    enc = codec.encode(qc, bitsback=cfg["bitsback"])
    encode_time = time.perf_counter() - t0
    out.write_bytes(enc.to_bytes())
    n, w, h = len(qc), qc.width, qc.height
    rbits = codec.record_bits(qc.bits, qc.stages, qc.codebook_size)
    metrics = {
        "n": n,
        "record_bits": rbits,
        "payload_bits": enc.payload_bits,
        "total_bits": enc.total_bits,
        "bpp": codec.bpp(enc, w, h),
        "pre_qat_psnr": qlog.pre_psnr,
        "post_qat_psnr": qlog.post_psnr,
    }
    if cfg["bitsback"]:
        k = select_k(n, rbits)
        metrics.update(
            bitsback_k=k,
            bitsback_saving_measured=n * rbits - enc.payload_bits,
            bitsback_saving_formula=expected_saving(n, k),
        )
    write_manifest(_manifest_path(args, out), "compress", cfg,
                   {"checkpoint": Path(args.checkpoint), "image": Path(args.image)}, {"stream": out}, metrics,
                   {"qat_s": qat_time, "encode_s": encode_time})
    return metrics


def cmd_decompress(args, cfg: dict) -> dict:
    data = Path(args.stream).read_bytes()
    t0 = time.perf_counter()
    qc = codec.decode(data)
    parse_time = time.perf_counter() - t0
    meta, _ = codec.decode_header(data)
    rcfg = RenderConfig(tile_size=cfg["tile_size"])
    img = qc.render(rcfg)  # warm-up, also compiles the kernels
    times = []
    for _ in range(cfg["repeats"]):
        t0 = time.perf_counter()
        qc.render(rcfg)
        times.append(time.perf_counter() - t0)
    out = Path(args.output)
    write_png(out, img)
    metrics = {"n": len(qc), "width": qc.width, "height": qc.height, "bitsback": bool(meta["flags"] & codec.FLAG_BITSBACK)}
    timings = {"parse_s": parse_time, "render_s_median": float(np.median(times)),
               "render_fps": 1.0 / float(np.median(times)), "repeats": cfg["repeats"]}
    if args.reference:
        metrics.update(vars(evaluate(read_image(args.reference), img, 8 * len(data) / (qc.width * qc.height))))
    inputs = {"stream": Path(args.stream)}
    if args.reference:
        inputs["reference"] = Path(args.reference)
    write_manifest(_manifest_path(args, out), "decompress", cfg, inputs, {"render": out}, metrics, timings)
    return {**metrics, **timings}


def cmd_eval(args, cfg: dict) -> dict:
    ref = read_image(args.reference)
    target = Path(args.candidate)
    rate = None
    if target.suffix == ".gsi":
        data = target.read_bytes()
        qc = codec.decode(data)
        recon = qc.render(RenderConfig(tile_size=cfg["tile_size"]))
        rate = 8 * len(data) / (qc.width * qc.height)
    else:
        recon = read_image(target)
    metrics = vars(evaluate(ref, recon, rate))
    if args.manifest:
        write_manifest(Path(args.manifest), "eval", cfg, {"reference": Path(args.reference), "candidate": target},
                       {}, metrics, {})
    return metrics


RD_COLUMNS = ["image", "n", "width", "height", "bpp", "bpp_bitsback", "bpp_bound", "psnr", "ms_ssim"]


def rd_point(target: np.ndarray, n: int, cfg: dict) -> dict:
    """Fit, fine-tune and code one (image, N) point of the rate-distortion curve."""
    height, width = target.shape[:2]
    cloud, _ = fit(target, train_config(cfg, n))
    qc, qlog = qat_finetune(cloud, target, qat_config(cfg))
    plain = codec.encode(qc)
    packed = codec.encode(qc, bitsback=True) if n >= 2 else plain
    recon = qc.render(RenderConfig(tile_size=cfg["tile_size"]))
    pixels = width * height
    return {
        "n": n,
        "width": width,
        "height": height,
        "bpp": plain.total_bits / pixels,
        "bpp_bitsback": packed.total_bits / pixels,
        "bpp_bound": plain.total_bits / pixels - rate_saving_bound(n) / pixels,
        "psnr": psnr(recon, target),
        "ms_ssim": ms_ssim(recon, target),
    }


def cmd_rd_sweep(args, cfg: dict) -> dict:
    folder = Path(args.image_dir)
    if not folder.is_dir():
        raise ImageReadError(f"not a directory: {folder}")
    ns = sorted({int(v) for v in args.num_gaussians_list.split(",")})
    rows, warnings, inputs = [], [], {}
    t_start = time.perf_counter()
    for path in sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".ppm")):
        try:
            target = read_image(path)
        except ImageReadError as exc:
            warnings.append(str(exc))
            continue
        inputs[path.name] = path
        for n in ns:
            rows.append({"image": path.name, **rd_point(target, n, cfg)})
            log.info("%s N=%d bpp=%.4f psnr=%.3f", path.name, n, rows[-1]["bpp"], rows[-1]["psnr"])
    out = Path(args.output)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    metrics = {"rows": len(rows), "n_values": ns}
    write_manifest(_manifest_path(args, out), "rd-sweep", cfg, inputs, {"table": out}, metrics,
                   {"sweep_s": time.perf_counter() - t_start}, {"warnings": warnings})
    return metrics


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values (flags take precedence)")
    p.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on worker threads (fallback: GSI_THREADS)")
    p.add_argument("--tile-size", dest="tile_size", type=int)


def _add_fit_flags(p: argparse.ArgumentParser, with_n: bool = True) -> None:
    if with_n:
        p.add_argument("--num-gaussians", dest="num_gaussians", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--factorization", choices=["cholesky", "rs"])


def _add_quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int)
    p.add_argument("--rvq-stages", dest="rvq_stages", type=int)
    p.add_argument("--codebook-size", dest="codebook_size", type=int)
    p.add_argument("--qat-steps", dest="qat_steps", type=int)
    p.add_argument("--qat-lr", dest="qat_lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsimage", description="Gaussian-splat image fitting and compression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit Gaussians to an image and write a .gsc checkpoint")
    p.add_argument("image")
    p.add_argument("-o", "--output", required=True)
    _add_fit_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compress", help="quantization-aware fine-tuning, then write a .gsi stream")
    p.add_argument("checkpoint")
    p.add_argument("--image", required=True, help="original image the checkpoint was fitted to")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--bitsback", action="store_const", const=True)
    _add_quant_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a .gsi stream and render it to PNG")
    p.add_argument("stream")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--reference", help="optional original image for PSNR/MS-SSIM")
    p.add_argument("--repeats", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="PSNR / MS-SSIM of an image or .gsi stream against a reference")
    p.add_argument("reference")
    p.add_argument("candidate")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-sweep", help="rate-distortion table over a directory of images")
    p.add_argument("image_dir")
    p.add_argument("--n", dest="num_gaussians_list", required=True, help="comma-separated Gaussian counts")
    p.add_argument("-o", "--output", required=True, help="CSV table path")
    _add_fit_flags(p, with_n=False)
    _add_quant_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_rd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        apply_threads(cfg["threads"])
        result = args.func(args, cfg)
    except UsageError as exc:
        print(f"gsimage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageReadError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"gsimage: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except codec.CodecError as exc:
        print(f"gsimage: codec error: {exc}", file=sys.stderr)
        return EXIT_CODEC
    except ArithmeticError as exc:
        print(f"gsimage: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # checkpoint parse failures and invalid option values
        print(f"gsimage: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    json.dump(_jsonable(result), sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


if __name__ == "__main__":
    sys.exit(main())
