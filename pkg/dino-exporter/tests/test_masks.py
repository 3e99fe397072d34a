from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from dino_exporter import ExporterError
from dino_exporter.masks import build_bank, load_mask, resize_nearest


def _write_mask(path, zeros: int, size: int = 32, seed: int = 0):
    flat = np.full(size * size, 255, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    flat[rng.permutation(flat.size)[:zeros]] = 0
    Image.fromarray(flat.reshape(size, size), mode="L").save(path)


@pytest.fixture()
def library(tmp_path):
    lib = tmp_path / "lib"
    lib.mkdir()
    # 32*32 = 1024 pixels: fractions 0.25, exactly 0.5, 0.625, 0.8125
    for name, zeros in (("a_light", 256), ("b_half", 512), ("c_heavy", 640), ("d_heavy", 832)):
        _write_mask(lib / f"{name}.png", zeros)
    return lib


def test_high_mode_keeps_strict_majority_hidden(library):
    bank = build_bank(library, "high", resolution=32)
    assert [r.id for r in bank] == ["c_heavy", "d_heavy"]
    assert all(r.zero_fraction > 0.5 for r in bank)


def test_low_mode_keeps_complement_including_exact_half(library):
    bank = build_bank(library, "low", resolution=32)
    assert [r.id for r in bank] == ["a_light", "b_half"]
    assert all(r.zero_fraction <= 0.5 for r in bank)


def test_mask_values_are_binary_and_one_keeps(library):
    mask = load_mask(library / "c_heavy.png", resolution=32)
    assert set(np.unique(mask)) == {0.0, 1.0}
    assert np.count_nonzero(mask == 0) == 640


def test_resize_nearest_preserves_binarity():
    rng = np.random.default_rng(1)
    m = (rng.uniform(size=(32, 32)) > 0.5).astype(np.float32)
    out = resize_nearest(m, 224, 224)
    assert out.shape == (224, 224)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_empty_library_rejected(tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.raises(ExporterError, match="no mask images"):
        build_bank(empty, "high", resolution=32)


def test_unknown_mode_rejected(library):
    with pytest.raises(ExporterError, match="mode"):
        build_bank(library, "medium", resolution=32)


def test_no_match_for_mode_rejected(tmp_path):
    lib = tmp_path / "lib"
    lib.mkdir()
    _write_mask(lib / "light.png", zeros=100)
    with pytest.raises(ExporterError, match="satisfy mode"):
        build_bank(lib, "high", resolution=32)
