import math

import numpy as np
import pytest

from hcpl import autodiff as ad
from hcpl import models as M
from hcpl.autodiff import Tensor
from hcpl.data.augment import AugmentConfig

SMALL = dict(channels_in=2, stage_widths=(3, 4), resolution=8)


def bce_oracle(p, y, w, eps=1e-7):
    p = np.clip(p, eps, 1 - eps)
    rows = []
    for pr, yr in zip(np.atleast_2d(p), np.atleast_2d(y)):
        s = sum(w[c] * (yr[c] * math.log(pr[c]) + (1 - yr[c]) * math.log(1 - pr[c]))
                for c in range(len(pr)))
        rows.append(-s / sum(w))
    return sum(rows) / len(rows)


def focal_oracle(p, y, g, w, eps=1e-7):
    p = np.clip(p, eps, 1 - eps)
    rows = []
    for pr, yr in zip(np.atleast_2d(p), np.atleast_2d(y)):
        s = 0.0
        for c in range(len(pr)):
            s += w[c] * (yr[c] * (1 - pr[c]) ** g * math.log(pr[c])
                         + (1 - yr[c]) * pr[c] ** g * math.log(1 - pr[c]))
        rows.append(-s / sum(w))
    return sum(rows) / len(rows)


# --- losses ------------------------------------------------------------------------------

def test_bce_examples():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    assert M.weighted_bce(Tensor(y), y).item() <= 4 * -math.log(1 - 1e-7)
    assert abs(M.weighted_bce(Tensor(np.full(4, 0.5)), y).item() - math.log(2)) < 1e-15


@pytest.mark.parametrize("seed", range(10))
def test_bce_and_focal_match_oracles(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, size=(3, 19))
    y = rng.uniform(0, 1, size=(3, 19))
    w = rng.uniform(0.2, 3, size=19)
    assert abs(M.weighted_bce(Tensor(p), y, w).item() - bce_oracle(p, y, w)) < 1e-10
    for g in (0.5, 2.0):
        assert abs(M.focal_loss(Tensor(p), y, g, w).item() - focal_oracle(p, y, g, w)) < 1e-10


def test_focal_gamma_zero_equals_bce():
    rng = np.random.default_rng(3)
    p, y = rng.uniform(size=19), (rng.uniform(size=19) > 0.5).astype(float)
    assert M.focal_loss(Tensor(p), y, 0.0).item() == M.weighted_bce(Tensor(p), y).item()


def test_focal_decays_faster_for_confident_predictions():
    y = np.array([1.0])
    ratios = [M.focal_loss(Tensor([p]), y, 2.0).item() / M.weighted_bce(Tensor([p]), y).item()
              for p in (0.9, 0.99, 0.999)]
    assert ratios[0] > ratios[1] > ratios[2] and ratios[2] < 1e-5


def test_soft_target_minimised_at_target():
    grid = np.linspace(0.01, 0.99, 99)
    for yv in (0.1, 0.37, 0.5, 0.8):
        vals = [M.weighted_bce(Tensor([p]), np.array([yv])).item() for p in grid]
        assert abs(grid[int(np.argmin(vals))] - yv) <= 0.01


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    y = rng.uniform(size=(2, 5))
    w = rng.uniform(0.5, 2, size=5)
    assert ad.gradient_check(lambda: M.weighted_bce(ad.sigmoid(z), y, w), [z]) <= 1e-4
    assert ad.gradient_check(lambda: M.focal_loss(ad.sigmoid(z), y, 2.0, w), [z]) <= 1e-4


def test_class_weights():
    lab = np.zeros((10, 19))
    lab[:8, 0] = 1
    lab[:2, 1] = 1
    w = M.class_weights_from_labels(lab)
    assert w[1] / w[0] == pytest.approx(4.0)
    assert (w[0] + w[1]) / 2 == pytest.approx(1.0)
    assert w[5] == w[0]


# --- DSA -----------------------------------------------------------------------------------

def small_model(family, seed=0, positive=False):
    m = M.build_model(M.ModelConfig(family=family, **SMALL), seed)
    rng = np.random.default_rng(seed + 1)
    if positive:
        for w, b in zip(m.backbone.weights, m.backbone.biases):
            w.data = rng.uniform(0.02, 0.2, size=w.shape)
            b.data = np.full(b.shape, 0.1)
    for name, p in m.named_parameters().items():
        if "head" in name or "fc_image" in name:
            p.data = rng.normal(0, 0.5, size=p.shape)
    return m


def test_dsa_singleton_and_duplication():
    m = small_model("dsa")
    X = np.random.default_rng(0).uniform(size=(3, 2, 8, 8))
    with ad.no_grad():
        V = m.descriptors(Tensor(X[:1])).data
        img1, _ = M.dsa_forward(m, Tensor(X[:1]))
        ref = ad.sigmoid(m.fc_image(Tensor(V))).data[0]
        np.testing.assert_array_equal(img1.data, ref)
        a, cells = M.dsa_forward(m, Tensor(X))
        b, _ = M.dsa_forward(m, Tensor(X[[2, 0, 1, 2, 0]]))
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-15)
    assert cells.shape == (3, 19)
    assert np.all((cells.data > 0) & (cells.data < 1))
    with pytest.raises(ad.ShapeError):
        m.forward_bags(Tensor(X), [np.array([], dtype=int)])


def test_dsa_loss_linear_in_weights():
    rng = np.random.default_rng(1)
    ip, cp = rng.uniform(size=19), rng.uniform(size=(3, 19))
    iy, cy = (rng.uniform(size=19) > .5) * 1.0, rng.uniform(size=(3, 19))
    l1 = M.weighted_bce(Tensor(ip), iy).item()
    l2 = M.weighted_bce(Tensor(cp), cy).item()
    assert M.dsa_loss(Tensor(ip), Tensor(cp), iy, cy, 1.0, 0.0).item() == l1
    assert abs(M.dsa_loss(Tensor(ip), Tensor(cp), iy, cy, 0.7, 0.3).item()
               - (0.7 * l1 + 0.3 * l2)) < 1e-12


def test_full_dsa_graph_gradient_two_cell_bag():
    for seed in range(20):
        m = small_model("dsa", seed, positive=True)
        rng = np.random.default_rng(50 + seed)
        X = Tensor(rng.uniform(0.1, 1.0, size=(2, 2, 8, 8)), requires_grad=True)
        iy = (rng.uniform(size=19) > 0.5) * 1.0
        cy = rng.uniform(size=(2, 19))

        def f():
            ip, cp = M.dsa_forward(m, X)
            return M.dsa_loss(ip, cp, iy, cy, 1.0, 0.2)

        assert ad.gradient_check(f, [X, *m.parameters()]) <= 1e-4, seed


# --- optimisation ----------------------------------------------------------------------------

def test_cosine_schedule_endpoints():
    assert M.cosine_lr(0, 100, 2e-4, 2e-6) == 2e-4
    assert M.cosine_lr(100, 100, 2e-4, 2e-6) == pytest.approx(2e-6, abs=1e-20)
    assert M.cosine_lr(50, 100, 2e-4, 2e-6) == pytest.approx((2e-4 + 2e-6) / 2)


def test_adam_step_decreases_quadratic():
    th = Tensor(np.array(1.0), requires_grad=True)
    opt = M.Adam([th])
    loss = ad.mul(th, th)
    ad.backward(loss)
    opt.step(0.1)
    assert th.data ** 2 < 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        M.TrainConfig(lr0=0).validate()
    with pytest.raises(ValueError):
        M.TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        M.TrainConfig(class_weights=np.zeros(19)).validate()


def blob_data(n, seed):
    """Two classes: a bright blob in the top-left or bottom-right quadrant."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 0.1, size=(n, 2, 8, 8))
    y = np.zeros((n, 19))
    cls = rng.integers(0, 2, size=n)
    for i, c in enumerate(cls):
        r, q = (rng.integers(0, 2), rng.integers(0, 2)) if c == 0 else (
            rng.integers(4, 6), rng.integers(4, 6))
        X[i, 1, r:r + 3, q:q + 3] += 1.0
        y[i, c] = 1.0
    return M.CellData(X, np.ones((n, 8, 8), bool), y), cls


@pytest.mark.parametrize("family", ["cla", "clh", "dsa"])
def test_training_reaches_high_accuracy_on_blobs(family):
    data, cls = blob_data(100, 0)
    cfg_m = M.ModelConfig(family=family, channels_in=2, stage_widths=(4, 8), resolution=8,
                          scat_J=1, scat_L=4)
    model = M.build_model(cfg_m, seed=0)
    # 100 cells in batches of 20 for 40 epochs = 200 steps
    cfg = M.TrainConfig(lr0=1e-2, epochs=40, batch_size=20, augment=AugmentConfig.off())
    bundle = M.train(model, data, cfg)
    assert len(bundle.loss_trace) == 40
    assert bundle.loss_trace[-1] < bundle.loss_trace[0]
    pred = M.predict(bundle, data).cell_probs
    acc = np.mean(np.argmax(pred[:, :2], axis=1) == cls)
    assert acc >= 0.95


def test_training_is_deterministic():
    data, _ = blob_data(30, 1)
    cfg = M.TrainConfig(lr0=1e-2, epochs=2, batch_size=10)
    runs = []
    for _ in range(2):
        model = M.build_model(M.ModelConfig(**SMALL), seed=4)
        runs.append(M.train(model, data, cfg))
    a, b = (r.model.state_dict() for r in runs)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert runs[0].loss_trace == runs[1].loss_trace


def test_non_finite_loss_aborts():
    data, _ = blob_data(20, 2)
    data.targets[0, 0] = np.nan
    model = M.build_model(M.ModelConfig(**SMALL), seed=0)
    with pytest.raises(ad.NonFiniteError):
        M.train(model, data, M.TrainConfig(lr0=1e-2, epochs=1))


# --- prediction and persistence ----------------------------------------------------------------

def test_predict_zero_head_is_half_and_deterministic():
    data, _ = blob_data(7, 3)
    model = M.build_model(M.ModelConfig(**SMALL), seed=0)
    p1 = M.predict(model, data)
    p2 = M.predict(model, data)
    assert p1.cell_probs.shape == (7, 19)
    assert np.all(p1.cell_probs == 0.5)
    assert p1.cell_probs.tobytes() == p2.cell_probs.tobytes()
    with pytest.raises(ad.ShapeError):
        M.predict(model, M.CellData(np.zeros((2, 2, 16, 16)), np.ones((2, 16, 16), bool)))


def test_dsa_predict_attaches_image_probs():
    data, _ = blob_data(6, 4)
    data.groups = np.array([0, 0, 0, 1, 1, 1])
    model = small_model("dsa")
    pm = M.predict(model, data)
    assert pm.image_probs.shape == (6, 19)
    np.testing.assert_array_equal(pm.image_probs[0], pm.image_probs[2])
    assert not np.array_equal(pm.image_probs[0], pm.image_probs[3])


@pytest.mark.parametrize("family", ["cla", "clh", "dsa"])
def test_bundle_round_trip(tmp_path, family):
    data, _ = blob_data(12, 5)
    model = M.build_model(M.ModelConfig(family=family, channels_in=2, stage_widths=(4, 8),
                                        resolution=8, scat_J=1), seed=0)
    bundle = M.train(model, data, M.TrainConfig(lr0=1e-2, epochs=1, batch_size=6))
    bundle.save(tmp_path)
    back = M.ModelBundle.load(tmp_path)
    assert back.family == family and back.loss_trace == bundle.loss_trace
    np.testing.assert_array_equal(back.class_weights, bundle.class_weights)
    a, b = M.predict(bundle, data), M.predict(back, data)
    assert a.cell_probs.tobytes() == b.cell_probs.tobytes()
