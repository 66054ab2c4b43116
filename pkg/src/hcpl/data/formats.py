"""Text formats: labels/prediction CSVs, ground truth, detections, RLE masks, key/value configs."""

import configparser
import csv

import numpy as np

N_CLASSES = 19


def fmt(v):
    """Shortest round-tripping text for a float."""
    return repr(float(v))


# --- RLE -----------------------------------------------------------------------
# "H W start length start length ..." with 0-based starts into the row-major
# flattened mask.

def rle_encode(mask):
    m = np.asarray(mask, dtype=bool)
    H, W = m.shape
    flat = np.concatenate([[False], m.ravel(), [False]])
    edges = np.flatnonzero(flat[1:] != flat[:-1])
    starts, ends = edges[::2], edges[1::2]
    parts = [str(H), str(W)]
    for s, e in zip(starts, ends):
        parts += [str(s), str(e - s)]
    return " ".join(parts)


def rle_decode(text):
    vals = [int(t) for t in text.split()]
    if len(vals) < 2 or len(vals) % 2:
        raise ValueError(f"malformed RLE: {text[:40]!r}")
    H, W = vals[:2]
    flat = np.zeros(H * W, dtype=bool)
    for s, n in zip(vals[2::2], vals[3::2]):
        if s < 0 or n < 0 or s + n > H * W:
            raise ValueError("RLE run outside the frame")
        flat[s:s + n] = True
    return flat.reshape(H, W)


# --- labels / predictions ----------------------------------------------------------

def label_header(prefix="c"):
    return [f"{prefix}{k}" for k in range(N_CLASSES)]


def write_labels_csv(path, cell_ids, image_ids, labels):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(cell_ids), N_CLASSES):
        raise ValueError(f"labels must be ({len(cell_ids)}, {N_CLASSES})")
    if len(set(cell_ids)) != len(cell_ids):
        raise ValueError("cell ids must be unique")
    if np.any(labels < 0) or np.any(labels > 1):
        raise ValueError("label entries must lie in [0, 1]")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "image_id", *label_header()])
        for cid, iid, row in zip(cell_ids, image_ids, labels):
            w.writerow([cid, iid, *(fmt(v) for v in row)])


def read_labels_csv(path):
    """Return ``(cell_ids, image_ids, labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["cell_id", "image_id", *label_header()]:
        raise ValueError(f"{path}: not a labels CSV")
    body = rows[1:]
    cell_ids = [r[0] for r in body]
    if len(set(cell_ids)) != len(cell_ids):
        raise ValueError(f"{path}: duplicate cell ids")
    labels = np.array([[float(v) for v in r[2:]] for r in body]).reshape(-1, N_CLASSES)
    return cell_ids, [r[1] for r in body], labels


def write_predictions_csv(path, cell_ids, probs):
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", *label_header("p")])
        for cid, row in zip(cell_ids, probs):
            w.writerow([cid, *(fmt(v) for v in row)])


def read_predictions_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["cell_id", *label_header("p")]:
        raise ValueError(f"{path}: not a predictions CSV")
    ids = [r[0] for r in rows[1:]]
    return ids, np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, N_CLASSES)


# --- cell tables, ground truth, detections -----------------------------------------------

def write_cells_csv(path, cell_ids, image_ids, rles):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "image_id", "rle"])
        w.writerows(zip(cell_ids, image_ids, rles))


def read_cells_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r["cell_id"] for r in rows], [r["image_id"] for r in rows], [r["rle"] for r in rows]


def write_ground_truth_csv(path, records):
    """``records``: iterable of (image_id, cell_id, class ids, rle)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "cell_id", "classes", "rle"])
        for iid, cid, classes, rle in records:
            w.writerow([iid, cid, ";".join(str(c) for c in sorted(classes)), rle])


def read_ground_truth_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["image_id"], r["cell_id"],
             frozenset(int(c) for c in r["classes"].split(";") if c != ""), r["rle"])
            for r in rows]


def write_detections_csv(path, detections):
    """``detections``: iterable of (image_id, class, score, rle)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "class", "score", "rle"])
        for iid, cls, score, rle in detections:
            w.writerow([iid, int(cls), fmt(score), rle])


def read_detections_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["image_id"], int(r["class"]), float(r["score"]), r["rle"]) for r in rows]


# --- key/value configs ----------------------------------------------------------------------

def read_config(path):
    """Parse a plain key/value file with ``[section]`` headers into nested dicts."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    return {s: dict(cp.items(s)) for s in cp.sections()}


def write_config(path, sections):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name, items in sections.items():
        cp[name] = {k: str(v) for k, v in items.items()}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
