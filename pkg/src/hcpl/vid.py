"""Visual integrity scoring.

Two signals are combined into one weight per cell: a boosted-tree classifier
on eight morphology features (is this a well-formed cell?) and a small CNN
that predicts how much of the cell body was cut away.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from hcpl import autodiff as ad
from hcpl import layers
from hcpl.autodiff import Tensor
from hcpl.data.tensorfile import read_tensor, write_tensor
from hcpl.models import Adam, cosine_lr

FEATURE_NAMES = ("bbox_height", "bbox_width", "aspect_ratio", "bbox_area", "mask_area",
                 "mask_perimeter", "largest_dimension", "intensity_flag")
CROP_BANDS = (0.3, 0.5, 0.8)
VISIBILITY = (1.0, 1.0, 0.5, 0.1)


# --- morphology ----------------------------------------------------------------------------

@dataclass
class MorphFeatures:
    bbox_height: int
    bbox_width: int
    aspect_ratio: float
    bbox_area: int
    mask_area: int
    mask_perimeter: int
    largest_dimension: int
    intensity_flag: int

    def vector(self):
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)


def boundary_pixels(mask):
    """Mask pixels with a 4-neighbour outside the mask (the frame counts as outside)."""
    m = np.pad(np.asarray(mask, bool), 1)
    inner = m[1:-1, 1:-1]
    interior = inner & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def morph_features(mask, image=None, intensity_threshold=0.05, channels=(1, 2)):
    """Eight shape features of one cell mask.

    ``intensity_flag`` is 1 when the protein and nucleus channels hold more than
    ``intensity_threshold`` of the cell's total pixel mass.
    """
    mask = np.asarray(mask, bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("morph_features: empty mask")
    h = int(rows.max() - rows.min() + 1)
    w = int(cols.max() - cols.min() + 1)
    flag = 0
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        total = img[:, mask].sum()
        part = sum(img[c][mask].sum() for c in channels)
        flag = int(total > 0 and part / total > intensity_threshold)
    return MorphFeatures(h, w, h / w, h * w, int(rows.size), int(boundary_pixels(mask).sum()),
                         max(h, w), flag)


# --- gradient-boosted trees -------------------------------------------------------------

@dataclass
class GbtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_child_hessian: float = 1e-3
    seed: int = 0


@dataclass
class GbtModel:
    base_score: float
    learning_rate: float
    max_depth: int
    trees: list = field(default_factory=list)  # each tree: list of node tuples
    loss_trace: list = field(default_factory=list)
    n_features: int = 8

    # node tuples: ("split", feature, threshold, left, right) or ("leaf", value)

    def margin(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * _tree_predict(tree, X)
        return out

    def predict_proba(self, X):
        return 1.0 / (1.0 + np.exp(-self.margin(X)))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)

    def dumps(self):
        lines = [f"gbt {len(self.trees)} {self.learning_rate!r} {self.max_depth} "
                 f"{self.base_score!r} {self.n_features}"]
        for t, tree in enumerate(self.trees):
            lines.append(f"tree {t} {len(tree)}")
            for i, node in enumerate(tree):
                if node[0] == "leaf":
                    lines.append(f"  {i} leaf {node[1]!r}")
                else:
                    _, f, thr, left, right = node
                    lines.append(f"  {i} split {f} {thr!r} {left} {right}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        lines = text.splitlines()
        head = lines[0].split()
        if head[0] != "gbt":
            raise ValueError("not a tree dump")
        model = cls(float(head[4]), float(head[2]), int(head[3]), n_features=int(head[5]))
        k = 1
        for _ in range(int(head[1])):
            n = int(lines[k].split()[2])
            tree = []
            for line in lines[k + 1:k + 1 + n]:
                parts = line.split()
                if parts[1] == "leaf":
                    tree.append(("leaf", float(parts[2])))
                else:
                    tree.append(("split", int(parts[2]), float(parts[3]), int(parts[4]),
                                 int(parts[5])))
            model.trees.append(tree)
            k += n + 1
        return model

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def _tree_predict(tree, X):
    out = np.empty(X.shape[0])
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node_id, idx = stack.pop()
        node = tree[node_id]
        if node[0] == "leaf":
            out[idx] = node[1]
            continue
        _, f, thr, left, right = node
        go_left = X[idx, f] < thr
        stack.append((left, idx[go_left]))
        stack.append((right, idx[~go_left]))
    return out


def _logloss(y, margin):
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def _best_split(X, g, h, idx, lam, min_h):
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + lam)
    best = (0.0, None, None)
    for f in range(X.shape[1]):
        order = idx[np.argsort(X[idx, f], kind="stable")]
        xs = X[order, f]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        valid = (xs[1:] > xs[:-1]) & (hl >= min_h) & (H - hl >= min_h)
        if not valid.any():
            continue
        gain = gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12:
            best = (float(gain[k]), f, float((xs[k] + xs[k + 1]) / 2))
    return best


def _grow(X, g, h, idx, depth, cfg, tree):
    node_id = len(tree)
    tree.append(None)
    gain, f, thr = (0.0, None, None)
    if depth < cfg.max_depth and len(idx) >= 2:
        gain, f, thr = _best_split(X, g, h, idx, cfg.reg_lambda, cfg.min_child_hessian)
    if f is None:
        tree[node_id] = ("leaf", float(-g[idx].sum() / (h[idx].sum() + cfg.reg_lambda)))
        return node_id
    left_idx = idx[X[idx, f] < thr]
    right_idx = idx[X[idx, f] >= thr]
    left = _grow(X, g, h, left_idx, depth + 1, cfg, tree)
    right = _grow(X, g, h, right_idx, depth + 1, cfg, tree)
    tree[node_id] = ("split", f, thr, left, right)
    return node_id


def gbt_train(X, y, cfg=None):
    """Boosted regression trees on the logistic loss with Newton leaf values.

    Splits are exact greedy over midpoints between distinct feature values.
    """
    cfg = cfg or GbtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, d) with one label per row")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be binary")
    if n_pos < 2 or n_neg < 2:
        raise ValueError("need at least two examples of each class")
    prior = n_pos / len(y)
    model = GbtModel(float(np.log(prior / (1 - prior))), cfg.learning_rate, cfg.max_depth,
                     n_features=X.shape[1])
    margin = np.full(len(y), model.base_score)
    model.loss_trace.append(_logloss(y, margin))
    idx = np.arange(len(y))
    for _ in range(cfg.n_trees):
        p = 1.0 / (1.0 + np.exp(-margin))
        g, h = p - y, p * (1 - p)
        tree = []
        _grow(X, g, h, idx, 0, cfg, tree)
        model.trees.append(tree)
        margin = margin + cfg.learning_rate * _tree_predict(tree, X)
        model.loss_trace.append(_logloss(y, margin))
    return model


def gbt_cross_validate(X, y, cfg=None, folds=5):
    """Mean held-out accuracy over stratified folds assigned from ``cfg.seed``."""
    cfg = cfg or GbtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    fold = np.empty(len(y), dtype=int)
    for cls in (0, 1):
        members = rng.permutation(np.flatnonzero(y == cls))
        fold[members] = np.arange(len(members)) % folds
    accs = []
    for k in range(folds):
        test = fold == k
        model = gbt_train(X[~test], y[~test], cfg)
        accs.append(float(np.mean(model.predict(X[test]) == y[test])))
    return float(np.mean(accs)), accs


# --- crop-ratio data and classifier ----------------------------------------------------

def crop_class(f):
    """Band index 1..4 of a removed fraction ``f`` (left-closed bands)."""
    if not 0 <= f < 1:
        raise ValueError("fraction must lie in [0, 1)")
    return 1 + int(np.searchsorted(CROP_BANDS, f, side="right"))


def crop_dataset_gen(image, mask, f, seed):
    """Cut a straight slice off one side of the cell so a fraction ``f`` of its area is gone.

    The cut direction is drawn from ``seed``; the pixels furthest along it are
    removed first. Returns ``(image, mask, crop_class)``.
    """
    cls = crop_class(f)
    mask = np.asarray(mask, bool)
    image = np.asarray(image, dtype=np.float64)
    area = int(mask.sum())
    n_remove = int(round(f * area))
    if n_remove >= area:
        raise ValueError("crop removes the whole cell")
    if n_remove == 0:
        return image.copy(), mask.copy(), cls
    theta = np.random.default_rng(seed).uniform(0, 2 * np.pi)
    rows, cols = np.nonzero(mask)
    proj = np.cos(theta) * cols + np.sin(theta) * rows
    order = np.argsort(-proj, kind="stable")[:n_remove]
    out_mask = mask.copy()
    out_mask[rows[order], cols[order]] = False
    return image * out_mask, out_mask, cls


def crop_training_set(tiles, masks, n, seed=0, max_fraction=0.95):
    """``n`` crops of randomly chosen cells with fractions uniform on [0, max_fraction)."""
    rng = np.random.default_rng(seed)
    X = np.empty((n,) + tiles.shape[1:])
    y = np.empty(n, dtype=int)
    frac = np.empty(n)
    for i in range(n):
        k = int(rng.integers(len(tiles)))
        f = float(rng.uniform(0, max_fraction))
        X[i], _, y[i] = crop_dataset_gen(tiles[k], masks[k], f, int(rng.integers(2 ** 31)))
        frac[i] = f
    return X, y, frac


class CropModel(layers.Module):
    """Backbone -> GAP -> 4-way softmax over crop bands."""

    n_classes = 4

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or layers.BackboneConfig(4, (16, 32, 64), 32)
        rng = np.random.default_rng(seed)
        self.backbone = layers.ToyBackbone(self.cfg, rng)
        self.head = layers.Linear(self.cfg.feature_dim, 4, rng)

    def features(self, X):
        return self.backbone(X)

    def class_logits_from_features(self, R):
        return self.head(layers.global_average_pool(R))

    def logits(self, X):
        return self.head(layers.global_average_pool(self.backbone(X)))

    def __call__(self, X):
        return ad.softmax(self.logits(X), axis=-1)


def softmax_cross_entropy(probs, y):
    """Mean negative log-probability of the integer targets ``y`` (0-based)."""
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(y)), y] = 1.0
    clamped = ad.add(ad.relu(ad.sub(probs, 1e-12)), 1e-12)
    return ad.mul(ad.reduce_mean(ad.reduce_sum(ad.mul(ad.log(clamped), onehot), axis=-1)), -1.0)


def train_crop_model(X, y, epochs=20, lr0=5e-3, batch_size=32, seed=0, cfg=None, log=None):
    """Fit a :class:`CropModel` on crops with 1-based band labels ``y``."""
    model = CropModel(cfg, seed)
    opt = Adam(model.parameters())
    rng = np.random.default_rng(seed)
    y0 = np.asarray(y) - 1
    steps_per = (len(X) + batch_size - 1) // batch_size
    T = epochs * steps_per
    step = 0
    trace = []
    for epoch in range(epochs):
        perm = rng.permutation(len(X))
        losses = []
        for s in range(0, len(X), batch_size):
            idx = perm[s:s + batch_size]
            model.zero_grad()
            loss = softmax_cross_entropy(model(Tensor(X[idx])), y0[idx])
            if not np.isfinite(loss.data):
                raise ad.NonFiniteError(f"crop model loss is {loss.data}")
            ad.backward(loss)
            opt.step(cosine_lr(step, T, lr0, lr0 / 100))
            step += 1
            losses.append(float(loss.data))
        trace.append(float(np.mean(losses)))
        if log is not None:
            log(f"crop epoch {epoch + 1}/{epochs} loss {trace[-1]:.4f}")
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    return model, trace


def crop_ratio_classify(model, X, chunk=64):
    """Band probabilities (N, 4), rows summing to one."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    res = model.cfg.resolution
    if X.shape[-2:] != (res, res):
        raise ad.ShapeError(f"crop model expects {res}x{res} tiles, got {X.shape[-2:]}")
    out = np.empty((len(X), 4))
    with ad.no_grad():
        for s in range(0, len(X), chunk):
            out[s:s + chunk] = model(Tensor(X[s:s + chunk])).data
    return out


def vid_weight(good_prob, crop_probs, visibility=VISIBILITY):
    """``good_prob * sum_k crop_probs[k] * v_k``; vectorised over leading axes."""
    good = np.asarray(good_prob, dtype=np.float64)
    crop = np.asarray(crop_probs, dtype=np.float64)
    return good * (crop @ np.asarray(visibility, dtype=np.float64))


# --- morphology training set -------------------------------------------------------------

def morph_training_set(tiles, masks, n, seed=0):
    """Intact cells (label 1) against fragments with over half the body cut away (label 0)."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for i in range(n):
        k = int(rng.integers(len(tiles)))
        good = i % 2 == 0
        f = float(rng.uniform(0.0, 0.15)) if good else float(rng.uniform(0.55, 0.9))
        img, m, _ = crop_dataset_gen(tiles[k], masks[k], f, int(rng.integers(2 ** 31)))
        feats.append(morph_features(m, img).vector())
        labels.append(int(good))
    return np.array(feats), np.array(labels)


@dataclass
class VidModels:
    gbt: GbtModel
    crop: CropModel
    visibility: tuple = VISIBILITY

    def weights(self, tiles, masks):
        """Per-cell weights from cell tiles and their tile-frame masks."""
        feats = np.array([morph_features(m, t).vector() for t, m in zip(tiles, masks)])
        good = self.gbt.predict_proba(feats)
        crop = crop_ratio_classify(self.crop, tiles)
        return vid_weight(good, crop, self.visibility)


def save_crop_model(model, root):
    os.makedirs(os.path.join(root, "params"), exist_ok=True)
    names = []
    for name, arr in model.state_dict().items():
        write_tensor(os.path.join(root, "params", name + ".hcpl"), arr)
        names.append(name)
    cfg = model.cfg
    with open(os.path.join(root, "crop_model.txt"), "w") as fh:
        fh.write(f"channels_in = {cfg.channels_in}\n"
                 f"stage_widths = {','.join(str(s) for s in cfg.stage_widths)}\n"
                 f"resolution = {cfg.resolution}\n"
                 f"params = {','.join(names)}\n")


def load_crop_model(root):
    path = os.path.join(root, "crop_model.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        kv = dict(line.rstrip("\n").split(" = ", 1) for line in fh if " = " in line)
    cfg = layers.BackboneConfig(int(kv["channels_in"]),
                                tuple(int(s) for s in kv["stage_widths"].split(",")),
                                int(kv["resolution"]))
    model = CropModel(cfg)
    model.load_state_dict({n: read_tensor(os.path.join(root, "params", n + ".hcpl"))
                           for n in kv["params"].split(",")})
    return model
