from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from PIL import Image

from dino_exporter import ExporterError
from dino_exporter.cli import main as cli_main
from dino_exporter.export import ExportJob, compute_features, load_rgb_resized, run_export
from dino_exporter.vit import build_vit_s8, load_weights


def _write_image(path, seed: int, size: int = 64):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 120, size=(size, size, 3), dtype=np.uint8)
    s = size // 4
    img[s : 3 * s, s : 3 * s] = rng.integers(160, 255, size=3, dtype=np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def _write_mask(path, zero_rows: int, size: int = 224):
    m = np.full((size, size), 255, dtype=np.uint8)
    m[:zero_rows] = 0
    Image.fromarray(m, mode="L").save(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    images = root / "data"
    images.mkdir()
    for i in range(3):
        _write_image(images / f"img{i}.png", seed=i)
    masks = root / "masks"
    masks.mkdir()
    _write_mask(masks / "heavy_a.png", zero_rows=150)
    _write_mask(masks / "heavy_b.png", zero_rows=180)
    _write_mask(masks / "light_a.png", zero_rows=40)
    torch.manual_seed(0)
    weights = root / "vit_s8.pth"
    torch.save(build_vit_s8().state_dict(), weights)
    return root


@pytest.fixture(scope="module")
def exported(workspace):
    out = workspace / "out_main"
    runner = CliRunner()
    result = runner.invoke(
        cli_main,
        ["export", "--dataset", str(workspace / "data"), "--masks", str(workspace / "masks"),
         "--variants", "2", "--source", "key", "--weights", str(workspace / "vit_s8.pth"),
         "--out", str(out)],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    return out


def _read_header(path):
    data = Path(path).read_bytes()
    magic, (version, gh, gw, dim, dtype) = data[:4], struct.unpack("<IIIII", data[4:24])
    id_len = struct.unpack("<H", data[24:26])[0]
    image_id = data[26 : 26 + id_len].decode()
    off = 26 + id_len
    tag = struct.unpack("<H", data[off : off + 2])[0]
    mask_id = None
    if tag == 1:
        mlen = struct.unpack("<H", data[off + 2 : off + 4])[0]
        mask_id = data[off + 4 : off + 4 + mlen].decode()
    return magic, version, gh, gw, dim, dtype, image_id, tag, mask_id


def test_export_layout_and_header(workspace, exported):
    files = sorted(p.name for p in (exported / "features").iterdir())
    assert files == [
        "img0.pkbf", "img0__m0.pkbf", "img0__m1.pkbf",
        "img1.pkbf", "img1__m0.pkbf", "img1__m1.pkbf",
        "img2.pkbf", "img2__m0.pkbf", "img2__m1.pkbf",
    ]
    assert not list(exported.rglob("*.tmp"))

    magic, version, gh, gw, dim, dtype, image_id, tag, mask_id = _read_header(
        exported / "features" / "img0.pkbf"
    )
    assert (magic, version, dtype) == (b"PKBF", 1, 0)
    assert (gh, gw, dim) == (28, 28, 384)  # 224x224 input at patch 8
    assert (image_id, tag, mask_id) == ("img0", 0, None)

    *_, image_id, tag, mask_id = _read_header(exported / "features" / "img1__m1.pkbf")
    assert (image_id, tag) == ("img1", 1)
    assert mask_id.split("#")[0] in {"heavy_a", "heavy_b"}

    doc = json.loads((exported / "manifest.json").read_text())
    assert doc["feature_source"] == "key"
    assert doc["encoder"] == "vit-s/8"
    assert doc["resolution"] == 224
    assert doc["mask_mode"] == "high"
    assert len(doc["images"]) == 3
    for entry in doc["images"]:
        assert Path(entry["image_path"]).is_file()
        assert (exported / entry["unmasked_feature_path"]).is_file()
        assert len(entry["masked_variants"]) == 2
        for var in entry["masked_variants"]:
            assert (exported / var["feature_path"]).is_file()
            assert var["mask_id"].split("#")[0] in {"heavy_a", "heavy_b"}


def test_masked_features_differ_from_unmasked(exported):
    plain = Path(exported / "features" / "img0.pkbf").read_bytes()
    masked = Path(exported / "features" / "img0__m0.pkbf").read_bytes()
    assert plain[-4000:] != masked[-4000:]  # payload tails differ


def test_export_is_deterministic(workspace):
    job = dict(dataset=str(workspace / "data"), weights=str(workspace / "vit_s8.pth"),
               mask_dir=str(workspace / "masks"), variants=1)
    reports = []
    for name in ("det_a", "det_b"):
        reports.append(run_export(ExportJob(out_dir=str(workspace / name), **job)))
    a, b = (r.manifest_path.parent for r in reports)
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for p in sorted((a / "features").iterdir()):
        assert p.read_bytes() == (b / "features" / p.name).read_bytes()


def test_source_selector_recorded_and_changes_features(workspace):
    outs = {}
    for source in ("key", "block_output"):
        out = workspace / f"src_{source}"
        run_export(ExportJob(dataset=str(workspace / "data"), out_dir=str(out),
                             weights=str(workspace / "vit_s8.pth"), variants=0, source=source))
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["feature_source"] == source
        outs[source] = (out / "features" / "img0.pkbf").read_bytes()
    assert outs["key"] != outs["block_output"]


def test_zero_variants_exports_unmasked_only(workspace):
    out = workspace / "zero"
    report = run_export(ExportJob(dataset=str(workspace / "data"), out_dir=str(out),
                                  weights=str(workspace / "vit_s8.pth"), variants=0))
    assert report.masked_records == 0
    assert sorted(p.name for p in (out / "features").iterdir()) == [
        "img0.pkbf", "img1.pkbf", "img2.pkbf"
    ]
    doc = json.loads((out / "manifest.json").read_text())
    assert all("masked_variants" not in entry for entry in doc["images"])


def test_variants_without_masks_rejected(workspace):
    with pytest.raises(ExporterError, match="mask directory"):
        run_export(ExportJob(dataset=str(workspace / "data"), out_dir="unused",
                             weights=str(workspace / "vit_s8.pth"), variants=2))


def test_corrupt_image_skipped_job_continues(workspace, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    _write_image(data / "good0.png", seed=10)
    (data / "bad.png").write_bytes(b"this is not an image")
    _write_image(data / "zgood1.png", seed=11)
    out = tmp_path / "out"
    report = run_export(ExportJob(dataset=str(data), out_dir=str(out),
                                  weights=str(workspace / "vit_s8.pth"), variants=0))
    assert report.exported_images == 2
    assert [image_id for image_id, _ in report.failures] == ["bad"]
    doc = json.loads((out / "manifest.json").read_text())
    assert [e["image_id"] for e in doc["images"]] == ["good0", "zgood1"]


def test_dataset_manifest_ground_truth_passthrough(workspace, tmp_path):
    data = tmp_path / "ds"
    (data / "images").mkdir(parents=True)
    (data / "gt").mkdir()
    _write_image(data / "images" / "x.png", seed=20)
    _write_mask(data / "gt" / "x.png", zero_rows=100, size=64)
    (data / "manifest.json").write_text(json.dumps({
        "images": [{
            "image_id": "x",
            "image_path": "images/x.png",
            "ground_truth_mask_path": "gt/x.png",
            "ground_truth_boxes": [[1, 2, 30, 40]],
        }]
    }))
    out = tmp_path / "out"
    run_export(ExportJob(dataset=str(data), out_dir=str(out),
                         weights=str(workspace / "vit_s8.pth"), variants=0))
    entry = json.loads((out / "manifest.json").read_text())["images"][0]
    assert entry["ground_truth_mask_path"].endswith("gt/x.png")
    assert entry["ground_truth_boxes"] == [[1, 2, 30, 40]]


# --- cross-package checks: the trainer consumes the exported store ---------------


def test_trainer_rereads_exported_features_bit_exact(workspace, exported):
    backends = pytest.importorskip("peekaboo.backends")
    rec = backends.read_feature_file(exported / "features" / "img2.pkbf")
    assert (rec.image_id, rec.variant, rec.mask_id) == ("img2", "unmasked", None)

    model = build_vit_s8()
    load_weights(model, workspace / "vit_s8.pth")
    raw = load_rgb_resized(workspace / "data" / "img2.png")
    np.testing.assert_array_equal(rec.features, compute_features(model, raw, "key"))

    masked = backends.read_feature_file(exported / "features" / "img2__m0.pkbf")
    assert masked.variant == "masked"
    assert masked.features.shape == (28, 28, 384)


def test_trainer_runs_on_exported_store(exported, tmp_path):
    pipeline = pytest.importorskip("peekaboo.pipeline")
    cfg = pipeline.config_from_dict(dict(
        manifest=str(exported / "manifest.json"),
        out_dir=str(tmp_path / "run"),
        seed=0, iterations=2, batch_size=2, resolution=224,
        augment=False, checkpoint_every=0,
        backend=dict(kind="replay"),
    ))
    summary = pipeline.train(cfg)
    assert np.isfinite(summary.final_total)
    assert summary.checkpoint_path.is_file()


def test_trainer_fails_fast_when_store_has_no_masked_variants(workspace, tmp_path):
    pipeline = pytest.importorskip("peekaboo.pipeline")
    out = workspace / "zero"
    if not (out / "manifest.json").is_file():
        run_export(ExportJob(dataset=str(workspace / "data"), out_dir=str(out),
                             weights=str(workspace / "vit_s8.pth"), variants=0))
    cfg = pipeline.config_from_dict(dict(
        manifest=str(out / "manifest.json"),
        out_dir=str(tmp_path / "run"),
        seed=0, iterations=1, batch_size=1, resolution=224,
        augment=False, checkpoint_every=0,
        backend=dict(kind="replay"),
    ))
    with pytest.raises(ValueError, match="no masked variants"):
        pipeline.train(cfg)
