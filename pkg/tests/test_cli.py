import json
import shutil

import numpy as np
import pytest

from gsimage import cli
from gsimage.checkpoint import dumps_cloud, load_cloud
from gsimage.train import TrainConfig, fit
from gsimage.imio import read_image

FAST = ["--steps", "30", "--num-gaussians", "40"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("cli")
    shutil.copy(data_dir / "rocket_64.png", d / "img.png")
    assert cli.main(["fit", str(d / "img.png"), "-o", str(d / "a.gsc"), *FAST]) == 0
    return d


def test_fit_outputs(workdir):
    for name in ("a.gsc", "a.render.png", "a.log.csv", "a.gsc.manifest.json", "a.gsc.manifest.timings.json"):
        assert (workdir / name).exists(), name
    man = json.loads((workdir / "a.gsc.manifest.json").read_text())
    assert man["command"] == "fit" and man["config"]["steps"] == 30 and man["config"]["num_gaussians"] == 40
    assert set(man["outputs"]) == {"checkpoint", "render"}
    assert len(man["inputs"]["image"]["hash"]) == 40


def test_fit_matches_in_process(workdir):
    target = read_image(workdir / "img.png")
    cloud, _ = fit(target, TrainConfig(steps=30, num_gaussians=40))
    assert (workdir / "a.gsc").read_bytes() == dumps_cloud(cloud)


def test_compress_decompress(workdir, capsys):
    gsi = workdir / "a.gsi"
    assert cli.main(["compress", str(workdir / "a.gsc"), "--image", str(workdir / "img.png"), "-o", str(gsi),
                     "--qat-steps", "20"]) == 0
    comp = json.loads(capsys.readouterr().out)
    assert comp["payload_bits"] == 40 * 56
    assert comp["bpp"] == pytest.approx(gsi.stat().st_size * 8 / 64**2)
    out = workdir / "a.out.png"
    assert cli.main(["decompress", str(gsi), "-o", str(out), "--reference", str(workdir / "img.png"),
                     "--repeats", "3"]) == 0
    dec = json.loads(capsys.readouterr().out)
    assert dec["psnr_db"] == pytest.approx(comp["post_qat_psnr"], abs=1e-6)
    assert dec["render_fps"] > 0 and out.exists()
    assert cli.main(["eval", str(workdir / "img.png"), str(gsi)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["psnr_db"] == pytest.approx(comp["post_qat_psnr"], abs=1e-6)


def test_compress_bitsback(workdir, capsys):
    gsi = workdir / "bb.gsi"
    assert cli.main(["compress", str(workdir / "a.gsc"), "--image", str(workdir / "img.png"), "-o", str(gsi),
                     "--qat-steps", "5", "--bitsback"]) == 0
    m = json.loads(capsys.readouterr().out)
    assert abs(m["bitsback_saving_measured"] - m["bitsback_saving_formula"]) <= 64
    assert cli.main(["decompress", str(gsi), "-o", str(workdir / "bb.png"), "--repeats", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["bitsback"] is True


def test_manifests_are_reproducible(workdir, capsys):
    args = ["compress", str(workdir / "a.gsc"), "--image", str(workdir / "img.png"), "-o", str(workdir / "r.gsi"),
            "--qat-steps", "10"]
    assert cli.main(args) == 0
    first = (workdir / "r.gsi.manifest.json").read_bytes()
    stream = (workdir / "r.gsi").read_bytes()
    assert cli.main(args) == 0
    assert (workdir / "r.gsi.manifest.json").read_bytes() == first
    assert (workdir / "r.gsi").read_bytes() == stream
    capsys.readouterr()


def test_config_precedence(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 7, "num_gaussians": 12, "seed": 4}))
    out = tmp_path / "c.gsc"
    assert cli.main(["fit", str(workdir / "img.png"), "-o", str(out), "--config", str(cfg), "--steps", "3"]) == 0
    man = json.loads((tmp_path / "c.gsc.manifest.json").read_text())
    assert man["config"]["steps"] == 3 and man["config"]["num_gaussians"] == 12 and man["seed"] == 4
    assert man["config"]["lr"] == 1e-3
    assert len(load_cloud(out)) == 12
    capsys.readouterr()


def test_exit_codes(workdir, tmp_path, capsys):
    img = str(workdir / "img.png")
    assert cli.main(["fit", str(tmp_path / "missing.png"), "-o", str(tmp_path / "x.gsc")]) == cli.EXIT_INPUT
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"warp": 9}))
    assert cli.main(["fit", img, "-o", str(tmp_path / "x.gsc"), "--config", str(bad_cfg)]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["fit", img])
    assert exc.value.code == cli.EXIT_USAGE
    corrupt = tmp_path / "bad.gsi"
    corrupt.write_bytes(b"XXXX" + bytes(300))
    assert cli.main(["decompress", str(corrupt), "-o", str(tmp_path / "o.png")]) == cli.EXIT_CODEC
    ckpt = tmp_path / "nan.gsc"
    cloud = load_cloud(workdir / "a.gsc")
    cloud.color_w[0, 0] = np.nan
    ckpt.write_bytes(dumps_cloud(cloud))
    assert cli.main(["compress", str(ckpt), "--image", img, "-o", str(tmp_path / "n.gsi"),
                     "--qat-steps", "2"]) == cli.EXIT_NUMERICAL
    capsys.readouterr()


def test_threads_env(workdir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GSI_THREADS", "1")
    assert cli.main(["eval", str(workdir / "img.png"), str(workdir / "img.png")]) == 0
    assert json.loads(capsys.readouterr().out)["psnr_db"] == 100.0
    monkeypatch.setenv("GSI_THREADS", "many")
    assert cli.main(["eval", str(workdir / "img.png"), str(workdir / "img.png")]) == cli.EXIT_USAGE


def test_rd_sweep(data_dir, tmp_path, capsys):
    images = tmp_path / "imgs"
    images.mkdir()
    for name in ("rocket_64.png", "chelsea_64.png"):
        shutil.copy(data_dir / name, images / name)
    (images / "broken.png").write_bytes(b"not an image")
    table = tmp_path / "rd.csv"
    assert cli.main(["rd-sweep", str(images), "--n", "20,40", "-o", str(table), "--steps", "10",
                     "--qat-steps", "3"]) == 0
    lines = table.read_text().splitlines()
    assert lines[0].split(",") == cli.RD_COLUMNS and len(lines) == 5
    man = json.loads((tmp_path / "rd.csv.manifest.json").read_text())
    assert len(man["warnings"]) == 1
    for line in lines[1:]:
        row = dict(zip(cli.RD_COLUMNS, line.split(",")))
        assert float(row["bpp_bound"]) <= float(row["bpp"])
    capsys.readouterr()
