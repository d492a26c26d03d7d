import json

import numpy as np
import pytest

from pcn.data import (
    SynthConfig,
    class_appearance,
    dataset_digest,
    generate_dataset,
    image_to_array,
    load_dataset,
    read_pnm,
    save_dataset,
    write_pnm,
)
from pcn.errors import ConfigError, FormatError

from conftest import SMALL


def test_fold_split_defaults():
    cfg = SynthConfig()
    assert cfg.novel_ids == [1, 2]
    assert cfg.base_ids == [3, 4, 5, 6, 7, 8]
    assert SynthConfig(fold=3).novel_ids == [7, 8]


def test_training_images_never_contain_novel_ids(small_ds):
    novel = set(small_ds.novel_ids)
    for i in small_ds.train_idx:
        assert not novel & set(np.unique(small_ds.masks[i]).tolist())
    seen_val = set(np.unique(small_ds.masks[small_ds.val_idx]).tolist())
    assert novel <= seen_val


def test_generation_is_pure_function_of_seed(small_ds):
    again = generate_dataset(SMALL, seed=0)
    assert again.images.tobytes() == small_ds.images.tobytes()
    assert again.masks.tobytes() == small_ds.masks.tobytes()
    other = generate_dataset(SMALL, seed=1)
    assert other.images.tobytes() != small_ds.images.tobytes()


def test_every_class_generatable_and_counts_match(small_ds):
    counts = small_ds.manifest["class_counts"]
    for split, idx in (("train", small_ds.train_idx), ("val", small_ds.val_idx)):
        for c in range(1, 9):
            expected = sum(bool(np.any(small_ds.masks[i] == c)) for i in idx)
            assert counts[split][str(c)] == expected
    assert all(counts["val"][str(c)] > 0 for c in range(1, 9))


def test_shapes_and_appearance(small_ds):
    assert small_ds.images.shape == (200, 32, 32, 3) and small_ds.images.dtype == np.uint8
    assert small_ds.masks.shape == (200, 32, 32)
    x = image_to_array(small_ds.images[0])
    assert x.shape == (3, 32, 32) and x.dtype == np.float64
    colours = {tuple(class_appearance(c)[0]) for c in range(1, 9)}
    assert len(colours) == 8


@pytest.mark.parametrize("kw", [dict(num_classes=7), dict(fold=4), dict(min_size=20, max_size=12), dict(image_size=7)])
def test_bad_config_rejected(kw):
    with pytest.raises(ConfigError):
        generate_dataset(SynthConfig(**kw), 0)


def test_round_trip_and_digest(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "a")
    loaded = load_dataset(root)
    assert loaded.images.tobytes() == small_ds.images.tobytes()
    assert loaded.masks.tobytes() == small_ds.masks.tobytes()
    assert loaded.base_ids == small_ds.base_ids
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["n_train"] == 160
    d1 = dataset_digest(root)
    d2 = dataset_digest(save_dataset(generate_dataset(SMALL, 0), tmp_path / "b"))
    assert d1 == d2 and len(d1) == 64


def test_truncated_image_names_the_file(tmp_path, small_ds):
    root = save_dataset(small_ds, tmp_path / "d")
    bad = root / "images" / "0003.ppm"
    bad.write_bytes(bad.read_bytes()[:-10])
    with pytest.raises(FormatError, match="0003.ppm"):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load_dataset(tmp_path)


def test_pnm_round_trip_8_and_16_bit(tmp_path):
    rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    write_pnm(tmp_path / "x.ppm", rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "x.ppm"), rgb)
    deep = np.array([[0, 65535], [256, 1]], dtype=np.uint16)
    write_pnm(tmp_path / "x.pgm", deep)
    back = read_pnm(tmp_path / "x.pgm")
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, deep)
    (tmp_path / "junk.pgm").write_bytes(b"P7\n1 1\n255\n\0")
    with pytest.raises(FormatError):
        read_pnm(tmp_path / "junk.pgm")
