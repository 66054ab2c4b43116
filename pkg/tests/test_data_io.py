import os

import numpy as np
import pytest

from hcpl.data import augment as aug
from hcpl.data import dataset as dsio
from hcpl.data import formats
from hcpl.data import phantom as ph
from hcpl.data.tensorfile import (TensorFileError, decode_tensor, encode_tensor, read_tensor,
                                  write_tensor)


# --- tensor container ---------------------------------------------------------------

def test_tensor_round_trip_bit_exact(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    p = tmp_path / "a.hcpl"
    write_tensor(p, a)
    b = read_tensor(p)
    assert b.dtype == np.float32 and b.shape == (3, 4, 5)
    assert a.tobytes() == b.tobytes()
    assert encode_tensor(b) == p.read_bytes()


def test_tensor_header_layout():
    buf = encode_tensor(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"HCPL" and buf[4] == 1 and buf[5] == 1 and buf[6] == 2
    assert buf[7:15] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 15 + 4 * 6


def test_rank0_scalar(tmp_path):
    p = tmp_path / "s.hcpl"
    write_tensor(p, np.float32(2.5))
    s = read_tensor(p)
    assert s.shape == () and s == np.float32(2.5)


def test_truncated_payload_rejected():
    buf = encode_tensor(np.ones((4, 4), np.float32))
    with pytest.raises(TensorFileError):
        decode_tensor(buf[:-3])
    with pytest.raises(TensorFileError):
        decode_tensor(buf[:9])


def test_bad_magic_and_dtype():
    buf = bytearray(encode_tensor(np.ones(3, np.float32)))
    with pytest.raises(TensorFileError, match="magic"):
        decode_tensor(b"XXXX" + bytes(buf[4:]))
    buf[5] = 7
    with pytest.raises(TensorFileError, match="dtype"):
        decode_tensor(bytes(buf))


# --- text formats ------------------------------------------------------------------

def test_rle_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = rng.random((7, 9)) < 0.4
        assert np.array_equal(formats.rle_decode(formats.rle_encode(m)), m)
    assert formats.rle_encode(np.zeros((2, 2), bool)) == "2 2"
    assert formats.rle_encode(np.ones((2, 2), bool)) == "2 2 0 4"


def test_labels_csv_round_trip_and_validation(tmp_path):
    p = tmp_path / "labels.csv"
    lab = np.random.default_rng(2).random((3, 19))
    formats.write_labels_csv(p, ["a", "b", "c"], ["i", "i", "j"], lab)
    ids, iids, back = formats.read_labels_csv(p)
    assert ids == ["a", "b", "c"] and iids == ["i", "i", "j"]
    assert np.array_equal(back, lab)
    with pytest.raises(ValueError):
        formats.write_labels_csv(p, ["a", "a"], ["i", "i"], np.zeros((2, 19)))
    with pytest.raises(ValueError):
        formats.write_labels_csv(p, ["a"], ["i"], np.full((1, 19), 1.5))


def test_config_round_trip(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[phantom]\nn_images = 4  # small\nSeed = 3\n")
    cfg = formats.read_config(p)
    assert cfg == {"phantom": {"n_images": "4", "Seed": "3"}}


# --- phantom generator ---------------------------------------------------------------

def small_cfg(**kw):
    base = dict(n_images=4, image_size=64, cells_per_image=4, seed=11)
    base.update(kw)
    return ph.PhantomConfig(**base)


def test_single_cell_weak_equals_true():
    d = ph.generate_phantom(small_cfg(cells_per_image=1, n_images=10))
    assert np.array_equal(d.cell_labels(weak=True), d.cell_labels())


def test_same_seed_bit_identical():
    a = ph.generate_phantom(small_cfg())
    b = ph.generate_phantom(small_cfg())
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.label_maps, b.label_maps)
    assert np.array_equal(a.cell_labels(), b.cell_labels())
    c = ph.generate_phantom(small_cfg(seed=12))
    assert a.images.tobytes() != c.images.tobytes()


def test_true_labels_subset_of_weak():
    d = ph.generate_phantom(small_cfg(n_images=8))
    assert np.all(d.cell_labels() <= d.cell_labels(weak=True))
    for i, lab in enumerate(d.image_labels):
        cells = [c.labels for c in d.cells if c.image_index == i]
        assert np.array_equal(np.max(cells, axis=0), lab)


def test_overlabel_rate_matches_expectation():
    # 1000 images x 10 cells = 10k cells
    cfg = ph.PhantomConfig(n_images=1000, cells_per_image=10, seed=5)
    d = ph.generate_labels(cfg)
    expected = ph.expected_overlabel_rate(cfg.express_prob, cfg.cells_per_image)
    assert abs(ph.measured_overlabel_rate(d) - expected) <= 0.02


def test_expected_overlabel_closed_form():
    # brute-force expectation over K ~ Binomial(n, q) conditioned on K >= 1
    from math import comb
    for q, n in [(0.6, 10), (0.3, 4), (0.9, 2), (0.5, 1)]:
        pk = [comb(n, k) * q ** k * (1 - q) ** (n - k) for k in range(n + 1)]
        false = sum(p * (n - k) for k, p in enumerate(pk) if k)
        weak = sum(p * n for k, p in enumerate(pk) if k)
        assert abs(ph.expected_overlabel_rate(q, n) - false / weak) < 1e-12


def test_channel_semantics():
    d = ph.generate_phantom(small_cfg(noise=0.0))
    blue = d.images[:, 2]
    assert np.all(blue[d.nucleus_maps] > 0.7)
    bg = d.label_maps == 0
    assert np.all(d.images.transpose(1, 0, 2, 3)[:, bg] == 0)


def test_invalid_configs():
    with pytest.raises(ph.PhantomError):
        ph.generate_phantom(small_cfg(cells_per_image=5))  # 4 slots in 64 px
    w = ph.default_class_weights()
    w[0] += 0.1
    with pytest.raises(ph.PhantomError):
        ph.generate_phantom(small_cfg(class_weights=w))
    with pytest.raises(ph.PhantomError):
        ph.generate_phantom(small_cfg(image_size=70))


def test_cell_tiles_shape_and_masking():
    d = ph.generate_phantom(small_cfg())
    tiles, masks = ph.dataset_tiles(d)
    assert tiles.shape == (16, 4, 32, 32) and masks.shape == (16, 32, 32)
    assert np.all(tiles[:, :, ~masks[0]][0] == 0)
    assert masks.mean() > 0.4


def test_dataset_save_load_round_trip(tmp_path):
    d = ph.generate_phantom(small_cfg())
    dsio.save_dataset(d, tmp_path, manifest={"seed": 11})
    for f in ("labels.csv", "truth.csv", "cells.csv", "ground_truth.csv", "image_labels.csv"):
        assert (tmp_path / f).exists()
    assert len(os.listdir(tmp_path / "images")) == 4
    back = dsio.load_dataset(tmp_path)
    assert np.array_equal(back.images, d.images)
    assert np.array_equal(back.label_maps, d.label_maps)
    assert np.array_equal(back.cell_labels(weak=True), d.cell_labels(weak=True))
    assert np.array_equal(back.cell_labels(), d.cell_labels())
    assert [c.label_id for c in back.cells] == [c.label_id for c in d.cells]
    assert [c.bbox for c in back.cells] == [tuple(int(v) for v in c.bbox) for c in d.cells]


def test_split_images_deterministic_and_disjoint():
    tr, te = dsio.split_images(50, 0.2, seed=3)
    assert len(te) == 10 and len(tr) == 40
    assert not set(tr) & set(te)
    tr2, te2 = dsio.split_images(50, 0.2, seed=3)
    assert np.array_equal(te, te2)


# --- augmentation ----------------------------------------------------------------------

@pytest.fixture
def tile():
    rng = np.random.default_rng(0)
    img = rng.random((4, 32, 32))
    y, x = np.mgrid[:32, :32]
    mask = ((y - 14) ** 2 / 100 + (x - 17) ** 2 / 64) <= 1
    return img * mask, mask


def test_all_off_is_identity(tile):
    img, mask = tile
    for seed in range(10):
        a, m = aug.augment(img, mask, aug.AugmentConfig.off(), seed)
        assert np.array_equal(a, img) and np.array_equal(m, mask)


def test_double_hflip_identity(tile):
    img, mask = tile
    a, m = aug.hflip(*aug.hflip(img, mask))
    assert np.array_equal(a, img) and np.array_equal(m, mask)


def test_rot90_preserves_mask_area(tile):
    img, mask = tile
    for k in range(4):
        _, m = aug.rot90(img, mask, k)
        assert m.sum() == mask.sum()
    a, m = aug.rot90(*aug.rot90(img, mask, 1), 3)
    assert np.array_equal(a, img) and np.array_equal(m, mask)


def test_augment_deterministic_and_joint(tile):
    img, mask = tile
    cfg = aug.AugmentConfig(max_rotation=30, scale_range=(0.9, 1.1), max_shift=3,
                            crop_area=(0.8, 1.0), cutout_area=0.2)
    a1, m1 = aug.augment(img, mask, cfg, 7)
    a2, m2 = aug.augment(img, mask, cfg, 7)
    assert np.array_equal(a1, a2) and np.array_equal(m1, m2)
    assert a1.shape == img.shape and m1.shape == mask.shape
    assert np.all(a1[:, ~m1] == 0)
    assert m1.any()


def test_empty_mask_falls_back_to_identity():
    img = np.ones((1, 8, 8))
    mask = np.zeros((8, 8), bool)
    mask[0, 0] = True
    # a shift of up to 6 px on a corner pixel empties the mask on most draws
    cfg = aug.AugmentConfig.off()
    cfg.max_shift = 6
    for seed in range(30):
        _, m = aug.augment(img, mask, cfg, seed)
        assert m.sum() >= 1


def test_invalid_augment_config(tile):
    with pytest.raises(ValueError):
        aug.augment(*tile, aug.AugmentConfig(crop_area=(0.5, 1.2)), 0)
