"""Synthetic four-channel cell images with known per-cell localisation labels.

Images are tiled into 32-pixel slots, each holding at most one elliptical cell
with an elliptical nucleus. Channel order: 0 red (microtubules), 1 green
(protein), 2 blue (nucleus), 3 yellow (ER). The green channel carries one
procedural texture per localisation class.

Each image draws one or more classes; every cell expresses each of them
independently with probability ``express_prob``. The image label is the union
of its cells' labels and every cell inherits it as a weak label, so cells that
did not express a class are over-labelled by construction.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

N_CLASSES = 19
SLOT = 32

CLASS_NAMES = (
    "nucleoplasm", "nuclear membrane", "nucleoli", "nucleoli fibrillar center",
    "nuclear speckles", "nuclear bodies", "endoplasmic reticulum", "golgi apparatus",
    "intermediate filaments", "actin filaments", "microtubules", "mitotic spindle",
    "centrosome", "plasma membrane", "mitochondria", "aggresome", "cytosol",
    "vesicles", "negative",
)

DEFAULT_ACTIVE = {0: 0.20, 1: 0.10, 2: 0.12, 8: 0.10, 12: 0.08, 13: 0.15, 15: 0.07, 16: 0.18}


def default_class_weights():
    w = np.zeros(N_CLASSES)
    for k, v in DEFAULT_ACTIVE.items():
        w[k] = v
    return w


class PhantomError(ValueError):
    pass


@dataclass
class PhantomConfig:
    n_images: int = 200
    image_size: int = 128
    cells_per_image: int = 10
    class_weights: np.ndarray = field(default_factory=default_class_weights)
    max_classes_per_image: int = 2
    express_prob: float = 0.6
    texture_strength: float = 1.0
    noise: float = 0.02
    seed: int = 0

    def validate(self):
        w = np.asarray(self.class_weights, dtype=float)
        if w.shape != (N_CLASSES,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise PhantomError("class_weights must be 19 non-negative values summing to 1")
        if self.image_size % SLOT:
            raise PhantomError(f"image_size must be a multiple of {SLOT}")
        slots = (self.image_size // SLOT) ** 2
        if not 1 <= self.cells_per_image <= slots:
            raise PhantomError(
                f"{self.cells_per_image} cells do not fit in {slots} slots of a "
                f"{self.image_size}px image")
        if not 1 <= self.max_classes_per_image <= np.count_nonzero(w):
            raise PhantomError("max_classes_per_image exceeds the number of active classes")
        if not 0 < self.express_prob <= 1:
            raise PhantomError("express_prob must be in (0, 1]")
        if self.n_images < 1:
            raise PhantomError("n_images must be positive")


@dataclass
class CellRecord:
    cell_id: str
    image_id: str
    image_index: int
    label_id: int
    bbox: tuple  # (r0, c0, r1, c1), end-exclusive
    labels: np.ndarray  # true per-cell labels
    weak_labels: np.ndarray  # inherited image-level labels


@dataclass
class PhantomDataset:
    config: PhantomConfig
    image_ids: list
    image_labels: np.ndarray  # (n_images, 19)
    cells: list
    images: np.ndarray = None  # (n_images, 4, H, W) float32 values
    label_maps: np.ndarray = None  # (n_images, H, W) int32
    nucleus_maps: np.ndarray = None  # (n_images, H, W) bool

    def cell_labels(self, weak=False):
        return np.array([c.weak_labels if weak else c.labels for c in self.cells])


def expected_overlabel_rate(express_prob, cells_per_image):
    """Expected fraction of weak positives that are false at cell level."""
    q, n = express_prob, cells_per_image
    miss = 1.0 - q
    return miss * (1.0 - miss ** (n - 1)) / (1.0 - miss ** n)


def measured_overlabel_rate(dataset):
    weak = dataset.cell_labels(weak=True) > 0
    true = dataset.cell_labels() > 0
    return float((weak & ~true).sum() / weak.sum())


def generate_phantom(cfg):
    """Build a dataset; images are rendered unless ``n_images`` is huge and only labels are wanted.

    Output is a pure function of ``cfg`` (including its seed).
    """
    return _generate(cfg, render=True)


def generate_labels(cfg):
    """Same label draw as :func:`generate_phantom` without rendering pixels."""
    return _generate(cfg, render=False)


def _generate(cfg, render):
    cfg.validate()
    w = np.asarray(cfg.class_weights, dtype=float)
    root = np.random.SeedSequence(cfg.seed)
    image_seeds = root.spawn(cfg.n_images)
    S = cfg.image_size
    n_slots = (S // SLOT) ** 2
    image_ids, image_labels, cells = [], [], []
    images = np.zeros((cfg.n_images, 4, S, S), dtype=np.float32) if render else None
    label_maps = np.zeros((cfg.n_images, S, S), dtype=np.int32) if render else None
    nuc_maps = np.zeros((cfg.n_images, S, S), dtype=bool) if render else None
    for i, ss in enumerate(image_seeds):
        label_rng, shape_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
        iid = f"img{i:04d}"
        k = int(label_rng.integers(1, cfg.max_classes_per_image + 1))
        classes = label_rng.choice(N_CLASSES, size=k, replace=False, p=w)
        expr = label_rng.random((cfg.cells_per_image, k)) < cfg.express_prob
        true = np.zeros((cfg.cells_per_image, N_CLASSES))
        for j, c in enumerate(classes):
            true[:, c] = expr[:, j]
        union = true.max(axis=0)
        slots = np.sort(shape_rng.choice(n_slots, size=cfg.cells_per_image, replace=False))
        image_ids.append(iid)
        image_labels.append(union)
        for n, slot in enumerate(slots):
            r0 = (slot // (S // SLOT)) * SLOT
            c0 = (slot % (S // SLOT)) * SLOT
            geom = _draw_geometry(shape_rng)
            cell_rng = np.random.default_rng(shape_rng.integers(2 ** 63))
            if render:
                bbox = _render_cell(images[i], label_maps[i], nuc_maps[i], r0, c0, n + 1,
                                    geom, true[n], cell_rng, cfg)
            else:
                bbox = (r0, c0, r0 + SLOT, c0 + SLOT)
            cells.append(CellRecord(f"{iid}_c{n:02d}", iid, i, n + 1, bbox,
                                    true[n].copy(), union.copy()))
        if render:
            noise_rng = np.random.default_rng(label_rng.integers(2 ** 63))
            img = images[i] + cfg.noise * noise_rng.normal(size=images[i].shape)
            images[i] = np.clip(img, 0.0, 1.0)
    return PhantomDataset(cfg, image_ids, np.array(image_labels), cells,
                          images, label_maps, nuc_maps)


def _draw_geometry(rng):
    a, b = rng.uniform(8.5, 13.0, size=2)
    return {
        "a": a, "b": b,
        "theta": rng.uniform(0, np.pi),
        "dy": rng.uniform(-2, 2), "dx": rng.uniform(-2, 2),
        "nuc_scale": rng.uniform(0.42, 0.55),
        "nuc_dy": rng.uniform(-1, 1), "nuc_dx": rng.uniform(-1, 1),
    }


def _ellipse_radius(y, x, cy, cx, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = c * (x - cx) + s * (y - cy)
    v = -s * (x - cx) + c * (y - cy)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2), u, v


def _dots(ctx, rng, region, count, radius, value):
    """Place ``count`` round dots with centres drawn from ``region``."""
    out = np.zeros(region.shape)
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        return out
    pick = rng.choice(len(ys), size=min(count, len(ys)), replace=False)
    for p in pick:
        d2 = (ctx["y"] - ys[p]) ** 2 + (ctx["x"] - xs[p]) ** 2
        out = np.maximum(out, value * (d2 <= radius ** 2))
    return out


def _pattern(c, ctx, rng):
    cell, nuc, cyto = ctx["cell"], ctx["nuc"], ctx["cyto"]
    rn, rc = ctx["rn"], ctx["rc"]
    y, x = ctx["y"], ctx["x"]
    if c == 0:
        return 0.7 * nuc
    if c == 1:
        return 0.9 * (np.abs(rn - 1.0) < 0.2) * cell
    if c == 2:
        return _dots(ctx, rng, nuc & (rn < 0.55), int(rng.integers(2, 4)), 2.2, 0.95)
    if c == 3:
        return _dots(ctx, rng, nuc & (rn < 0.8), int(rng.integers(6, 10)), 0.9, 0.9)
    if c == 4:
        return _dots(ctx, rng, nuc & (rn < 0.8), int(rng.integers(8, 13)), 1.3, 0.6)
    if c == 5:
        return _dots(ctx, rng, nuc & (rn < 0.8), int(rng.integers(3, 6)), 1.0, 1.0)
    if c == 6:
        noise = ndimage.gaussian_filter(rng.normal(size=cell.shape), 1.2)
        return 0.55 * (noise > 0.05) * cyto
    if c == 7:
        return _dots(ctx, rng, cyto & (rn > 1.1) & (rn < 1.5), 1, 3.5, 0.85)
    if c == 8:
        phase = rng.uniform(0, 2 * np.pi)
        return 0.8 * (np.cos(2 * np.pi * (x + y) / 6.0 + phase) > 0.2) * cyto
    if c == 9:
        t = rng.uniform(0, np.pi)
        return 0.7 * (np.cos(2 * np.pi * (np.cos(t) * x + np.sin(t) * y) / 3.0) > 0.6) * cell
    if c == 10:
        ang = np.arctan2(y - ctx["cy"], x - ctx["cx"])
        return 0.7 * (np.cos(12 * ang + rng.uniform(0, 6.3)) > 0.7) * cyto
    if c == 11:
        u = ctx["u"]
        return 0.9 * ((np.abs(ctx["v"]) < 1.0) & (np.abs(u) < 0.45 * ctx["a"])) * cell
    if c == 12:
        # a hollow ring beside the nucleus
        centre = _dots(ctx, rng, cyto & (rn > 1.4) & (rc < 0.7), 1, 0.0, 1.0)
        if not centre.any():
            return centre
        cy_, cx_ = np.argwhere(centre)[0]
        d = np.hypot(y - cy_, x - cx_)
        return 1.0 * ((d >= 2.0) & (d <= 4.0))
    if c == 13:
        return 0.9 * (np.abs(rc - 0.9) < 0.1) * cell
    if c == 14:
        return _dots(ctx, rng, cyto, int(rng.integers(15, 26)), 1.0, 0.7)
    if c == 15:
        return _dots(ctx, rng, cyto & (rc < 0.75) & (rn > 1.4), 1, 4.0, 1.0)
    if c == 16:
        return 0.5 * cyto
    if c == 17:
        return _dots(ctx, rng, cell, int(rng.integers(20, 35)), 0.7, 0.8)
    return np.zeros(cell.shape)


def _render_cell(img, lab, nucmap, r0, c0, label_id, g, labels, rng, cfg):
    y, x = np.mgrid[0:SLOT, 0:SLOT].astype(float)
    cy, cx = SLOT / 2 - 0.5 + g["dy"], SLOT / 2 - 0.5 + g["dx"]
    rc, u, v = _ellipse_radius(y, x, cy, cx, g["a"], g["b"], g["theta"])
    cell = rc <= 1.0
    ny, nx = cy + g["nuc_dy"], cx + g["nuc_dx"]
    rn, _, _ = _ellipse_radius(y, x, ny, nx, g["a"] * g["nuc_scale"], g["b"] * g["nuc_scale"],
                               g["theta"])
    nuc = (rn <= 1.0) & cell
    cyto = cell & ~nuc
    ctx = dict(cell=cell, nuc=nuc, cyto=cyto, rn=rn, rc=rc, y=y, x=x, cy=cy, cx=cx,
               u=u, v=v, a=g["a"])
    green = np.zeros((SLOT, SLOT))
    for c in np.flatnonzero(labels):
        green = green + _pattern(int(c), ctx, rng)
    green = np.clip(cfg.texture_strength * green, 0, 1) * cell
    ang = np.arctan2(y - cy, x - cx)
    red = (0.25 + 0.12 * np.cos(10 * ang + rng.uniform(0, 6.3))) * cell
    yellow = (0.22 + 0.1 * ndimage.gaussian_filter(rng.normal(size=cell.shape), 1.5)) * cyto
    blue = 0.8 * nuc
    sl = np.s_[r0:r0 + SLOT, c0:c0 + SLOT]
    for ch, arr in enumerate((red, green, blue, yellow)):
        img[ch][sl] = np.where(cell, arr, img[ch][sl])
    lab[sl][cell] = label_id
    nucmap[sl] |= nuc
    rows, cols = np.nonzero(cell)
    return (r0 + rows.min(), c0 + cols.min(), r0 + rows.max() + 1, c0 + cols.max() + 1)


def probability_maps(dataset, index, blur=1.2, noise=0.03, seed=0):
    """Soft nucleus and cell maps standing in for segmentation network outputs."""
    rng = np.random.default_rng([seed, index])
    nuc = ndimage.gaussian_filter(dataset.nucleus_maps[index].astype(float), blur)
    cell = ndimage.gaussian_filter((dataset.label_maps[index] > 0).astype(float), blur)
    nuc = np.clip(nuc + noise * rng.normal(size=nuc.shape), 0, 1)
    cell = np.clip(cell + noise * rng.normal(size=cell.shape), 0, 1)
    return nuc, cell


def cell_tile(image, mask, size=32, margin=1):
    """Crop a cell's bounding box (plus margin), zero outside the mask, resize to ``size``.

    Returns ``(tile (C, size, size), tile_mask (size, size))``.
    """
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise ValueError("empty mask")
    H, W = mask.shape
    r0, r1 = max(rows.min() - margin, 0), min(rows.max() + 1 + margin, H)
    c0, c1 = max(cols.min() - margin, 0), min(cols.max() + 1 + margin, W)
    m = mask[r0:r1, c0:c1].astype(float)
    crop = image[:, r0:r1, c0:c1] * m
    h, w = m.shape
    gy = (np.arange(size) + 0.5) * h / size - 0.5
    gx = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    tile = np.stack([ndimage.map_coordinates(ch, [yy, xx], order=1, mode="nearest")
                     for ch in crop])
    tmask = ndimage.map_coordinates(m, [yy, xx], order=0, mode="nearest") > 0.5
    return tile * tmask, tmask


def dataset_tiles(dataset, size=32):
    """Tiles and tile masks for every cell, in dataset order."""
    tiles = np.zeros((len(dataset.cells), 4, size, size))
    masks = np.zeros((len(dataset.cells), size, size), dtype=bool)
    for n, c in enumerate(dataset.cells):
        mask = dataset.label_maps[c.image_index] == c.label_id
        tiles[n], masks[n] = cell_tile(dataset.images[c.image_index], mask, size)
    return tiles, masks
