"""Cell-tile augmentation applied jointly to an image (C, H, W) and its mask (H, W)."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAX_TRIES = 10


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rot90: bool = True
    max_rotation: float = 90.0  # degrees, arbitrary-angle rotation
    scale_range: tuple = (0.9, 1.1)
    max_shift: int = 2  # pixels
    crop_area: tuple = (0.8, 1.0)  # kept fraction of the area before resizing back
    cutout_area: float = 0.2  # max fraction of the tile erased by one square

    @classmethod
    def off(cls):
        return cls(flip_prob=0.0, rot90=False, max_rotation=0.0, scale_range=(1.0, 1.0),
                   max_shift=0, crop_area=(1.0, 1.0), cutout_area=0.0)

    def validate(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        lo, hi = self.crop_area
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_area must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.cutout_area < 1:
            raise ValueError("cutout_area must be in [0, 1)")
        if self.max_shift < 0 or self.max_rotation < 0:
            raise ValueError("max_shift and max_rotation must be non-negative")


def hflip(image, mask):
    return image[..., :, ::-1].copy(), mask[:, ::-1].copy()


def vflip(image, mask):
    return image[..., ::-1, :].copy(), mask[::-1, :].copy()


def rot90(image, mask, k=1):
    return (np.rot90(image, k, axes=(-2, -1)).copy(), np.rot90(mask, k).copy())


def _affine(image, mask, angle, scale, shift):
    """Rotate by ``angle`` degrees and scale about the centre, then translate."""
    H, W = mask.shape
    t = np.deg2rad(angle)
    # output -> input coordinate map
    m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) / scale
    centre = np.array([(H - 1) / 2, (W - 1) / 2])
    offset = centre - m @ (centre + np.asarray(shift, float))
    img = np.stack([ndimage.affine_transform(ch, m, offset, order=1, mode="constant")
                    for ch in image])
    msk = ndimage.affine_transform(mask.astype(float), m, offset, order=0, mode="constant") > 0.5
    return img * msk, msk


def _crop_resize(image, mask, frac, r0, c0):
    H, W = mask.shape
    h, w = max(1, int(round(H * np.sqrt(frac)))), max(1, int(round(W * np.sqrt(frac))))
    r0, c0 = int(r0 * (H - h)), int(c0 * (W - w))
    zoom = (H / h, W / w)
    img = np.stack([ndimage.zoom(ch[r0:r0 + h, c0:c0 + w], zoom, order=1, grid_mode=True,
                                 mode="nearest") for ch in image])
    msk = ndimage.zoom(mask[r0:r0 + h, c0:c0 + w].astype(float), zoom, order=0,
                       grid_mode=True, mode="nearest") > 0.5
    return img[:, :H, :W] * msk[:H, :W], msk[:H, :W]


def _sample_once(image, mask, cfg, rng):
    # every draw happens regardless of the config so the stream stays aligned
    u = rng.random(8)
    k = int(rng.integers(4))
    if u[0] < cfg.flip_prob:
        image, mask = hflip(image, mask)
    if u[1] < cfg.flip_prob:
        image, mask = vflip(image, mask)
    if cfg.rot90 and k:
        image, mask = rot90(image, mask, k)
    angle = (2 * u[2] - 1) * cfg.max_rotation
    lo, hi = cfg.scale_range
    scale = lo + (hi - lo) * u[3]
    shift = np.round((2 * u[4:6] - 1) * cfg.max_shift)
    if angle != 0 or scale != 1 or np.any(shift):
        image, mask = _affine(image, mask, angle, scale, shift)
    lo, hi = cfg.crop_area
    frac = lo + (hi - lo) * u[6]
    if frac < 1:
        image, mask = _crop_resize(image, mask, frac, u[7], rng.random())
    if cfg.cutout_area > 0:
        H, W = mask.shape
        side = int(np.sqrt(rng.random() * cfg.cutout_area * H * W))
        r, c = rng.integers(0, H), rng.integers(0, W)
        if side:
            image = image.copy()
            mask = mask.copy()
            image[:, r:r + side, c:c + side] = 0
            mask[r:r + side, c:c + side] = False
    return image, mask


def augment(image, mask, cfg, seed):
    """Apply one sampled transform to ``image`` and ``mask`` alike.

    Deterministic in ``seed``. A sample that empties the mask is redrawn up to
    ten times, after which the inputs are returned untouched.
    """
    cfg.validate()
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[-2:] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} disagree")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_TRIES):
        out_img, out_mask = _sample_once(image, mask, cfg, rng)
        if out_mask.any() or not mask.any():
            return out_img, out_mask
    return image.copy(), mask.copy()
