import numpy as np
import pytest

from hcpl import autodiff as ad
from hcpl import vid


def boundary_oracle(mask):
    H, W = mask.shape
    count = 0
    for r in range(H):
        for c in range(W):
            if not mask[r, c]:
                continue
            nbrs = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            if any(not (0 <= a < H and 0 <= b < W) or not mask[a, b] for a, b in nbrs):
                count += 1
    return count


def test_square_features():
    m = np.zeros((20, 20), bool)
    m[3:13, 5:15] = True
    f = vid.morph_features(m)
    assert (f.bbox_height, f.bbox_width, f.aspect_ratio, f.bbox_area, f.mask_area) == (
        10, 10, 1.0, 100, 100)
    assert f.mask_perimeter == 36 == boundary_oracle(m)
    assert f.largest_dimension == 10


def test_single_pixel_and_empty():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    f = vid.morph_features(m)
    assert f.mask_area == 1 and f.mask_perimeter == 1 and f.largest_dimension == 1
    with pytest.raises(ValueError):
        vid.morph_features(np.zeros((3, 3), bool))


def test_perimeter_matches_oracle_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random((12, 15)) < 0.6
        assert vid.boundary_pixels(m).sum() == boundary_oracle(m)


def test_features_translation_invariant():
    rng = np.random.default_rng(1)
    m = np.zeros((30, 30), bool)
    m[5:15, 4:12] = rng.random((10, 8)) < 0.8
    img = rng.random((4, 30, 30))
    a = vid.morph_features(m, img).vector()
    b = vid.morph_features(np.roll(m, (7, 9), (0, 1)), np.roll(img, (7, 9), (1, 2))).vector()
    np.testing.assert_array_equal(a, b)


def test_intensity_flag():
    m = np.ones((4, 4), bool)
    img = np.zeros((4, 4, 4))
    img[0] = 1.0
    assert vid.morph_features(m, img).intensity_flag == 0
    img[1] = 0.1
    assert vid.morph_features(m, img).intensity_flag == 1


# --- boosted trees --------------------------------------------------------------------------

def separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = (X[:, 1] > 0.2).astype(int)
    return X, y


def test_single_stump_separates():
    X, y = separable()
    y[:] = 0
    y[: len(y) // 2] = 1
    X[:, 1] = np.where(y == 1, 1.0, -1.0) + 0.1 * np.arange(len(y)) / len(y)
    model = vid.gbt_train(X, y, vid.GbtConfig(n_trees=1, max_depth=1))
    assert np.mean(model.predict(X) == y) == 1.0
    assert model.trees[0][0][1] == 1
    Xi, yi = separable(seed=3)
    stump = vid.gbt_train(Xi, yi, vid.GbtConfig(n_trees=1, max_depth=1, learning_rate=1.0))
    assert np.mean(stump.predict(Xi) == yi) == 1.0


def test_zero_trees_predicts_prior():
    X, y = separable()
    model = vid.gbt_train(X, y, vid.GbtConfig(n_trees=0))
    np.testing.assert_allclose(model.predict_proba(X), y.mean(), rtol=1e-12)


def test_training_loss_never_increases():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(120, 8))
    y = ((X[:, 0] + X[:, 3] ** 2 + 0.5 * rng.normal(size=120)) > 1).astype(int)
    model = vid.gbt_train(X, y)
    assert len(model.loss_trace) == 101
    assert all(b <= a + 1e-15 for a, b in zip(model.loss_trace, model.loss_trace[1:]))
    for tree in model.trees:
        for node in tree:
            if node[0] == "split":
                assert 0 <= node[1] < 8


def test_degenerate_labels_rejected():
    X = np.zeros((5, 2))
    with pytest.raises(ValueError):
        vid.gbt_train(X, np.ones(5))
    with pytest.raises(ValueError):
        vid.gbt_train(X, np.array([0, 0, 0, 1, 2]))


def test_dump_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(60, 8))
    y = (X[:, 2] > 0).astype(int)
    model = vid.gbt_train(X, y, vid.GbtConfig(n_trees=10))
    model.save(tmp_path / "gbt.txt")
    back = vid.GbtModel.load(tmp_path / "gbt.txt")
    assert back.dumps() == model.dumps()
    assert back.margin(X).tobytes() == model.margin(X).tobytes()


def test_cross_validation_deterministic():
    X, y = separable(60, 6)
    a = vid.gbt_cross_validate(X, y, vid.GbtConfig(n_trees=5))
    b = vid.gbt_cross_validate(X, y, vid.GbtConfig(n_trees=5))
    assert a == b and len(a[1]) == 5 and a[0] > 0.85


# --- crops -----------------------------------------------------------------------------

def disc(size=32, r=12):
    y, x = np.mgrid[:size, :size]
    m = (y - size / 2 + 0.5) ** 2 + (x - size / 2 + 0.5) ** 2 <= r * r
    img = np.random.default_rng(0).random((4, size, size)) * m
    return img, m


def test_crop_classes():
    assert vid.crop_class(0.2) == 1
    assert vid.crop_class(0.4) == 2
    assert vid.crop_class(0.9) == 4
    assert [vid.crop_class(f) for f in (0.0, 0.3, 0.5, 0.8)] == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        vid.crop_class(1.0)


def test_crop_generation():
    img, m = disc()
    a, am, cls = vid.crop_dataset_gen(img, m, 0.0, 1)
    assert cls == 1 and np.array_equal(a, img) and np.array_equal(am, m)
    for f in (0.2, 0.45, 0.7, 0.9):
        out, om, cls = vid.crop_dataset_gen(img, m, f, 3)
        assert cls == vid.crop_class(f)
        assert m.sum() - om.sum() == round(f * m.sum())
        assert np.all(om <= m) and np.all(out[:, ~om] == 0)
        again = vid.crop_dataset_gen(img, m, f, 3)
        assert np.array_equal(again[1], om)
    tiny = np.zeros((4, 4), bool)
    tiny[1, 1] = True
    with pytest.raises(ValueError):
        vid.crop_dataset_gen(np.ones((4, 4, 4)), tiny, 0.6, 0)


def test_crop_model_outputs_distribution():
    model = vid.CropModel(seed=0)
    X = np.random.default_rng(1).random((5, 4, 32, 32))
    p = vid.crop_ratio_classify(model, X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p.tobytes() == vid.crop_ratio_classify(model, X).tobytes()
    with pytest.raises(ad.ShapeError):
        vid.crop_ratio_classify(model, np.zeros((1, 4, 16, 16)))


def test_softmax_cross_entropy_gradient():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        y = rng.integers(0, 4, size=3)
        f = lambda: vid.softmax_cross_entropy(ad.softmax(z, axis=-1), y)
        assert ad.gradient_check(f, [z]) <= 1e-4


# --- weighting ---------------------------------------------------------------------------

def test_vid_weight_examples():
    assert vid.vid_weight(1.0, [1, 0, 0, 0]) == 1.0
    assert vid.vid_weight(0.0, [0.2, 0.3, 0.4, 0.1]) == 0.0
    assert vid.vid_weight(0.8, [0, 0, 1, 0]) == pytest.approx(0.4, abs=1e-15)


def test_vid_weight_monotone():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(4))
        g1, g2 = np.sort(rng.uniform(size=2))
        assert vid.vid_weight(g1, p) <= vid.vid_weight(g2, p)
        k = int(rng.integers(0, 3))
        moved = p.copy()
        delta = moved[k] * rng.uniform()
        moved[k] -= delta
        moved[k + 1] += delta
        assert vid.vid_weight(g2, moved) <= vid.vid_weight(g2, p) + 1e-15
        assert 0.0 <= vid.vid_weight(g2, p) <= 1.0


def test_crop_model_save_load(tmp_path):
    model = vid.CropModel(seed=3)
    for p in model.parameters():  # trained models are stored f32-exact
        p.data = p.data.astype(np.float32).astype(np.float64)
    vid.save_crop_model(model, tmp_path / "crop")
    back = vid.load_crop_model(tmp_path / "crop")
    X = np.random.default_rng(2).random((3, 4, 32, 32))
    assert vid.crop_ratio_classify(back, X).tobytes() == vid.crop_ratio_classify(model, X).tobytes()
    with pytest.raises(FileNotFoundError):
        vid.load_crop_model(tmp_path / "missing")
