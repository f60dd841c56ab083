import json
import os

import numpy as np
import pytest
import torch

from licrobust.harness import cli
from licrobust.harness.config import WORKERS_ENV, ConfigError, SuiteConfig, schema
from licrobust.harness.data import make_dataset, texture
from licrobust.harness.io import ImageFormatError, center_crop8, load_image, save_image
from licrobust.harness.suite import IncompleteBundle, emit_plotdata, run_suite
from licrobust.models import CompressionModel, Family, load_checkpoint, model_bytes, save_checkpoint


def _ppm(path, w, h, data, maxval=255, header=None):
    head = header if header is not None else b"P6\n%d %d\n%d\n" % (w, h, maxval)
    path.write_bytes(head + bytes(data))
    return path


# -- images ---------------------------------------------------------------------


def test_ppm_all_white(tmp_path):
    rec = load_image(_ppm(tmp_path / "w.ppm", 2, 2, [255] * 12))
    assert rec.pixels.shape == (1, 3, 2, 2) and torch.equal(rec.pixels, torch.ones(1, 3, 2, 2))
    assert rec.bit_depth == 8


def test_ppm_header_comments_and_16bit(tmp_path):
    p = _ppm(tmp_path / "c.ppm", 1, 1, [0, 255, 0, 0, 255, 255], header=b"P6 # note\n1 # w\n1\n65535\n")
    rec = load_image(p)
    assert rec.bit_depth == 16
    assert rec.pixels.view(-1).tolist() == pytest.approx([255 / 65535, 0.0, 1.0])


def test_center_crop_to_multiple_of_8(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(65, 67, 3), dtype=np.uint8)
    rec = load_image(_ppm(tmp_path / "odd.ppm", 67, 65, arr.tobytes()))
    assert rec.size == (64, 64)
    # 65 -> 64 drops 0 rows on top; 67 -> 64 drops 1 column on the left
    assert torch.equal(rec.pixels[0, :, 0, 0], torch.from_numpy(arr[0, 1] / 255.0).float())
    assert center_crop8(np.zeros((5, 9))).shape == (5, 8)


@pytest.mark.parametrize("ext", [".ppm", ".png"])
def test_save_load_roundtrip(tmp_path, ext):
    x = make_dataset(1, 4, 64)
    save_image(x, tmp_path / f"img{ext}")
    back = load_image(tmp_path / f"img{ext}").pixels
    assert float((back - x).abs().max()) <= 1 / 255
    rec = load_image(tmp_path / f"img{ext}")
    rec.check_model_input()


def test_image_errors(tmp_path):
    with pytest.raises(ImageFormatError):
        load_image(_ppm(tmp_path / "p3.ppm", 1, 1, [], header=b"P3\n1 1\n255\n"))
    with pytest.raises(ImageFormatError):
        load_image(_ppm(tmp_path / "bad.ppm", 1, 1, [], header=b"P6\nx 1\n255\n"))
    with pytest.raises(ImageFormatError):
        load_image(_ppm(tmp_path / "short.ppm", 2, 2, [0] * 5))
    (tmp_path / "j.jpg").write_bytes(b"\xff\xd8\xff\xe0junk")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "j.jpg")
    small = load_image(_ppm(tmp_path / "s.ppm", 8, 8, [0] * 192))
    with pytest.raises(ImageFormatError):
        small.check_model_input()


def test_texture_generator_is_seeded():
    a, b = texture(5), texture(5)
    assert np.array_equal(a, b) and a.shape == (64, 64, 3)
    assert 0.0 <= a.min() and a.max() <= 1.0
    assert not np.array_equal(texture(5), texture(6))


# -- config ---------------------------------------------------------------------


def test_config_validation(tmp_path, monkeypatch):
    assert schema()["title"] == "SuiteConfig"
    cfg = SuiteConfig.from_dict({"lambdas": [0.01], "synthetic_images": 1}, str(tmp_path))
    assert cfg.directions[0] == [1.0, 0.0] and len(cfg.directions) == 6
    for bad in (
        {"lambdas": [], "synthetic_images": 1},
        {"lambdas": [0.01]},
        {"lambdas": [-1.0], "synthetic_images": 1},
        {"lambdas": [0.01], "synthetic_images": 1, "bogus": 1},
        {"lambdas": [0.01], "images": ["missing.ppm"]},
        {"lambdas": [0.01], "synthetic_images": 1, "directions": [[0, 0]]},
        {"lambdas": [0.01], "synthetic_images": 1, "checkpoint_dir": "nope"},
    ):
        with pytest.raises(ConfigError):
            SuiteConfig.from_dict(bad, str(tmp_path))
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert cfg.effective_workers() == 3
    monkeypatch.setenv(WORKERS_ENV, "0")
    with pytest.raises(ConfigError):
        cfg.effective_workers()
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lambdas": [0.01], "synthetic_images": 1, "output_dir": "o"}))
    assert SuiteConfig.load(p).output_dir == str(tmp_path / "o")


# -- suite ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    for li in range(6):
        torch.manual_seed(li)
        m = CompressionModel(Family.HYPER_S, 0.002 * 2**li)
        with torch.no_grad():
            m.ga["conv2"].weight.mul_(30.0)
        save_checkpoint(m, d / f"HYPER_S_{li}.licm")
    return d


def _cfg(tmp_path, ckpt_dir, **kw):
    d = {
        "lambdas": [0.002 * 2**li for li in range(6)],
        "families": ["HYPER_S"],
        "synthetic_images": 2,
        "checkpoint_dir": str(ckpt_dir),
        "train": {"enabled": False},
        "steps": 1,
        "output_dir": str(tmp_path / "out"),
    }
    d.update(kw)
    return SuiteConfig.from_dict(d)


def test_suite_counts_resume_and_determinism(tmp_path, ckpt_dir):
    cfg = _cfg(tmp_path, ckpt_dir)
    bundle = run_suite(cfg)
    assert bundle.ok
    kinds = [r.attack for r in bundle.reports]
    assert kinds.count("srda") == 72 and kinds.count("arda") == 72
    assert len({(r.image_id, r.direction) for r in bundle.reports if r.attack == "arda"}) == 12
    manifest = (tmp_path / "out" / "manifest.jsonl").read_text()
    arda_entries = [json.loads(l) for l in manifest.splitlines() if l.startswith('{"id": "arda/')]
    assert arda_entries and all(len(e["init_losses"][0]) == 6 for e in arda_entries)
    first = (tmp_path / "out" / "reports.csv").read_bytes()
    again = run_suite(cfg)
    assert (tmp_path / "out" / "manifest.jsonl").read_text() == manifest  # nothing recomputed
    assert (tmp_path / "out" / "reports.csv").read_bytes() == first
    assert len(again.reports) == len(bundle.reports)
    cfg2 = _cfg(tmp_path, ckpt_dir, output_dir=str(tmp_path / "fresh"))
    run_suite(cfg2)
    assert (tmp_path / "fresh" / "reports.csv").read_bytes() == first
    files = emit_plotdata(bundle)
    names = sorted(os.path.basename(f) for f in files)
    assert names == ["delta_scatter.csv", "rd_curves_HYPER_S.csv"]
    header = open(files[0]).readline().strip() if "rd_curves" in files[0] else open(files[1]).readline().strip()
    assert header == "lambda_index,bpp_pre,psnr_pre,bpp_post,psnr_post,direction"
    with pytest.raises(IncompleteBundle):
        emit_plotdata(bundle, figures=["ldmr"])


def test_suite_zero_budget(tmp_path, ckpt_dir):
    cfg = _cfg(tmp_path, ckpt_dir, eps=0.0, arda=False, synthetic_images=1, lambdas=[0.002, 0.004])
    bundle = run_suite(cfg)
    srda_reports = [r for r in bundle.reports if r.attack == "srda"]
    assert len(srda_reports) == 12
    assert all(r.delta_rate == 0.0 and r.delta_dist == 0.0 for r in bundle.reports)


def test_suite_measurements_and_defenses(tmp_path, ckpt_dir):
    cfg = _cfg(
        tmp_path, ckpt_dir, lambdas=[0.002], synthetic_images=2, directions=[[1, 0], [0, 1]], steps=2,
        eci=True, ldmr=True, local_maps=True,
        defense={"online": True, "online_iters": 2, "at": True, "at_iters": 1, "at_batch": 1, "at_attack_steps": 1},
        train={"enabled": False, "images": 2, "size": 64},
    )
    bundle = run_suite(cfg)
    assert bundle.ok, bundle.failed
    attacks = {r.attack for r in bundle.reports}
    assert attacks == {"srda", "srda+online", "srda@at", "arda", "noise"}
    out = tmp_path / "out"
    for name in ("reports.csv", "reports.json", "eci.csv", "ldmr.csv"):
        assert (out / name).exists()
    assert len(list((out / "maps").glob("*.pgm"))) == 8
    files = {os.path.basename(f): f for f in emit_plotdata(bundle)}
    ldmr = open(files["ldmr_HYPER_S.csv"]).read().splitlines()
    assert len(ldmr) == 1 + 13
    traj = np.genfromtxt(files["defense_trajectory.csv"], delimiter=",", names=True)
    assert np.all(np.diff(traj["iteration"]) > 0)
    nested = json.loads((out / "reports.json").read_text())
    assert set(nested["aggregates"]["srda"]) == {"all", "direction", "submodel"}


def test_suite_records_failures(tmp_path, ckpt_dir):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "HYPER_S_0.licm").write_bytes(b"garbage")
    cfg = _cfg(tmp_path, bad, lambdas=[0.002], synthetic_images=1, directions=[[1, 0]], arda=False)
    bundle = run_suite(cfg)
    assert not bundle.ok and len(bundle.failed) == 2
    lines = [json.loads(l) for l in (tmp_path / "out" / "manifest.jsonl").read_text().splitlines()]
    assert all(l["status"] == "failed" for l in lines)


# -- CLI ------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, ckpt_dir, capsys):
    ck = str(ckpt_dir / "HYPER_S_0.licm")
    img = tmp_path / "x.ppm"
    save_image(make_dataset(1, 2, 64), img)
    assert cli.main(["train", "--family", "FACTORIZED", "--lmbda", "0.01", "--steps", "2", "--batch", "1",
                     "--train-images", "2", "--train-size", "64", "--out", str(tmp_path / "t.licm"),
                     "--trace", str(tmp_path / "t.csv")]) == 0
    assert load_checkpoint(tmp_path / "t.licm").family == Family.FACTORIZED
    adv = str(tmp_path / "a.ppm")
    assert cli.main(["attack", "srda", "--checkpoint", ck, "--image", str(img), "--steps", "2", "--out", adv]) == 0
    assert cli.main(["attack", "arda", "--checkpoint", ck, str(ckpt_dir / "HYPER_S_1.licm"),
                     "--image", "synthetic:3", "--steps", "2", "--gamma-d", "0.02", "--out", str(tmp_path / "b.ppm")]) == 0
    assert cli.main(["eval", "--checkpoint", ck, "--image", str(img), "--adv", adv,
                     "--bitstream", str(tmp_path / "x.licb")]) == 0
    assert (tmp_path / "x.licb").read_bytes()[:4] == b"LICB"
    assert cli.main(["eci", "--checkpoint", ck, "--image", str(img), "--adv", adv]) == 0
    assert cli.main(["ldmr", "--checkpoint", ck, "--image", str(img), "--adv", adv, "--out", str(tmp_path / "l.csv")]) == 0
    before = model_bytes(load_checkpoint(ck))
    assert cli.main(["defend", "online", "--checkpoint", ck, "--image", adv, "--iters", "2", "--out", str(tmp_path / "u.ppm")]) == 0
    assert model_bytes(load_checkpoint(ck)) == before
    assert cli.main(["defend", "at", "--checkpoint", ck, "--iters", "1", "--batch", "1", "--attack-steps", "1",
                     "--train-images", "2", "--train-size", "64", "--out", str(tmp_path / "at.licm")]) == 0
    out = capsys.readouterr().out
    assert "do_set" in out and "LDMR=" in out
    assert cli.main(["eval", "--checkpoint", ck, "--image", str(tmp_path / "missing.ppm")]) == 2


def test_cli_report_exit_codes(tmp_path, ckpt_dir):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({
        "lambdas": [0.002], "families": ["HYPER_S"], "synthetic_images": 1, "checkpoint_dir": str(ckpt_dir),
        "train": {"enabled": False}, "directions": [[1, 0]], "steps": 1, "arda": False, "output_dir": "o1",
    }))
    assert cli.main(["report", "--config", str(good)]) == 0
    assert cli.main(["report", "--config", str(good), "--output-dir", str(tmp_path / "o2"), "--eps", "0"]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "lambdas": [0.002, 0.004], "families": ["HYPER_S"], "synthetic_images": 1,
        "train": {"enabled": False}, "directions": [[1, 0]], "steps": 1, "output_dir": "o3",
    }))
    assert cli.main(["report", "--config", str(bad)]) == 1
    assert cli.main(["report", "--config", str(tmp_path / "none.json")]) == 2


def test_sixteen_bit_keeps_small_perturbations(tmp_path):
    x = make_dataset(1, 4, 64)
    xa = (x + 1e-3 * torch.randn(x.shape, generator=torch.Generator().manual_seed(0))).clamp(0, 1)
    save_image(xa, tmp_path / "a.ppm", bit_depth=16)
    back = load_image(tmp_path / "a.ppm")
    assert back.bit_depth == 16
    assert float((back.pixels - xa).abs().max()) <= 0.5 / 65535 + 1e-7
    with pytest.raises(ValueError):
        save_image(xa, tmp_path / "a.png", bit_depth=16)
