"""Mask-matched average precision and the 19-class mean.

A detection counts as a true positive when it overlaps an unclaimed ground-truth
cell of the same image carrying its class with IoU strictly above ``iou_th``.
"""

import csv
from fractions import Fraction
from dataclasses import dataclass

import numpy as np

from hcpl.data.formats import N_CLASSES, fmt, rle_decode

IOU_TH = 0.6


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: int
    score: float
    mask: object  # bool array or RLE text


@dataclass(frozen=True)
class GroundTruthCell:
    image_id: str
    cell_id: str
    classes: frozenset
    mask: object


def _as_mask(m):
    return rle_decode(m) if isinstance(m, str) else np.asarray(m, dtype=bool)


def mask_iou(a, b):
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask frames differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ValueError("IoU undefined for two empty masks")
    return np.count_nonzero(a & b) / union


class IouCache:
    """IoU between every detection mask and every GT mask of the same image.

    Detections sharing a mask object (or RLE string) are decoded once, so scoring
    19 per-class detections of one cell costs a single row.
    """

    def __init__(self, dets, gts):
        keyrow = {}  # (image, mask key) -> row in that image's table
        first = {}  # image -> detection indices owning each row
        self.row = np.zeros(len(dets), dtype=np.int64)
        for i, d in enumerate(dets):
            k = (d.image_id, d.mask if isinstance(d.mask, str) else id(d.mask))
            if k not in keyrow:
                rows = first.setdefault(d.image_id, [])
                keyrow[k] = len(rows)
                rows.append(i)
            self.row[i] = keyrow[k]
        gt_by_image = {}
        self.col = np.zeros(len(gts), dtype=np.int64)
        for j, g in enumerate(gts):
            cols = gt_by_image.setdefault(g.image_id, [])
            self.col[j] = len(cols)
            cols.append(j)
        self.tables = {}
        for iid, di in first.items():
            gj = gt_by_image.get(iid)
            if not gj:
                continue
            D = np.stack([_as_mask(dets[i].mask).ravel() for i in di]).astype(np.float64)
            G = np.stack([_as_mask(gts[j].mask).ravel() for j in gj]).astype(np.float64)
            if D.shape[1] != G.shape[1]:
                raise ValueError(f"image {iid}: detection and GT frames differ")
            if np.any(D.sum(axis=1) == 0):
                raise ValueError(f"image {iid}: empty detection mask")
            inter = D @ G.T
            union = D.sum(1)[:, None] + G.sum(1)[None, :] - inter
            self.tables[iid] = inter / union

    def iou(self, i, j, image_id):
        t = self.tables.get(image_id)
        return 0.0 if t is None else float(t[self.row[i], self.col[j]])


def _order(dets):
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("detection scores must be finite")
    return np.argsort(-scores, kind="stable")


def match_detections(dets, gts, cls, iou_th=IOU_TH, cache=None):
    """TP/FP flag per detection of class ``cls``, in descending-score order.

    Returns ``(order, flags)`` where ``order`` indexes ``dets``. Ties keep input
    order; among eligible GT cells the highest IoU wins, then the earliest.
    """
    cache = cache or IouCache(dets, gts)
    idx = [i for i, d in enumerate(dets) if d.cls == cls]
    order = [idx[k] for k in _order([dets[i] for i in idx])]
    by_image = {}
    for j, g in enumerate(gts):
        if cls in g.classes:
            by_image.setdefault(g.image_id, []).append(j)
    used = set()
    flags = np.zeros(len(order), dtype=bool)
    for n, i in enumerate(order):
        d = dets[i]
        best, best_iou = None, iou_th
        for j in by_image.get(d.image_id, ()):
            if j in used:
                continue
            v = cache.iou(i, j, d.image_id)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None:
            used.add(best)
            flags[n] = True
    return np.array(order, dtype=np.int64), flags


def average_precision(flags, n_gt):
    """Area under the precision-recall curve with the monotone precision envelope."""
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0 or flags.size == 0:
        return 0.0
    # exact rational sum, rounded once; the envelope peaks only at true positives
    hits = np.flatnonzero(flags) + 1
    total, best = Fraction(0), Fraction(0)
    for tp in range(len(hits), 0, -1):
        best = max(best, Fraction(tp, int(hits[tp - 1])))
        total += best
    return float(total / n_gt)


@dataclass
class MapResult:
    mean_ap: float
    per_class: np.ndarray  # NaN where excluded
    n_gt: np.ndarray
    included: np.ndarray

    def write_csv(self, path, names=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "name", "n_gt", "ap", "included"])
            for c, ap in enumerate(self.per_class):
                name = names[c] if names else str(c)
                w.writerow([c, name, int(self.n_gt[c]), "" if np.isnan(ap) else fmt(ap),
                            int(self.included[c])])
            w.writerow(["mean", "", int(self.n_gt.sum()), fmt(self.mean_ap), ""])

    def summary(self):
        return f"mAP {self.mean_ap:.4f}"


def map19(dets, gts, n_classes=N_CLASSES, iou_th=IOU_TH, exclude_absent=True):
    """Per-class AP and their mean; classes without ground truth are skipped by default."""
    for d in dets:
        if not 0 <= d.cls < n_classes:
            raise ValueError(f"class {d.cls} out of range")
    cache = IouCache(dets, gts)
    n_gt = np.zeros(n_classes, dtype=np.int64)
    for g in gts:
        for c in g.classes:
            n_gt[c] += 1
    per = np.full(n_classes, np.nan)
    included = n_gt > 0 if exclude_absent else np.ones(n_classes, dtype=bool)
    for c in range(n_classes):
        if not included[c]:
            continue
        _, flags = match_detections(dets, gts, c, iou_th, cache)
        per[c] = average_precision(flags, int(n_gt[c]))
    mean = sum(per[included].tolist()) / int(included.sum()) if included.any() else 0.0
    return MapResult(mean, per, n_gt, included)


def detections_from_predictions(cell_ids, probs, cells):
    """One detection per (cell, class); ``cells`` maps cell_id to (image_id, mask)."""
    out = []
    probs = np.asarray(probs, dtype=np.float64)
    for cid, row in zip(cell_ids, probs):
        iid, mask = cells[cid]
        for c, p in enumerate(row):
            out.append(Detection(iid, c, float(p), mask))
    return out
