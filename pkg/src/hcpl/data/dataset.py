"""On-disk dataset layout.

::

    root/
      images/<image_id>.hcpl     (4, H, W) float32
      masks/<image_id>.hcpl      (H, W) instance ids, 0 = background
      nuclei/<image_id>.hcpl     (H, W) 0/1 nucleus mask (phantoms only)
      probmaps/<image_id>.hcpl   (2, H, W) nucleus / cell probability
      labels.csv                 weak per-cell labels
      truth.csv                  true per-cell labels (phantoms only)
      image_labels.csv           image_id,c0..c18
      cells.csv                  cell_id,image_id,rle
      ground_truth.csv           image_id,cell_id,classes,rle
      manifest.txt               generator settings
"""

import csv
import os

import numpy as np

from hcpl.data import formats
from hcpl.data.phantom import CellRecord, PhantomDataset, probability_maps
from hcpl.data.tensorfile import read_tensor, write_tensor


def _path(root, sub, iid):
    return os.path.join(root, sub, f"{iid}.hcpl")


def cell_mask(dataset, cell):
    return dataset.label_maps[cell.image_index] == cell.label_id


def save_dataset(dataset, root, probmaps=True, manifest=None):
    for sub in ("images", "masks", "nuclei", "probmaps"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for i, iid in enumerate(dataset.image_ids):
        write_tensor(_path(root, "images", iid), dataset.images[i])
        write_tensor(_path(root, "masks", iid), dataset.label_maps[i])
        if dataset.nucleus_maps is not None:
            write_tensor(_path(root, "nuclei", iid), dataset.nucleus_maps[i])
        if probmaps and dataset.nucleus_maps is not None:
            seed = dataset.config.seed if dataset.config is not None else 0
            write_tensor(_path(root, "probmaps", iid),
                         np.stack(probability_maps(dataset, i, seed=seed)))
    cids = [c.cell_id for c in dataset.cells]
    ciids = [c.image_id for c in dataset.cells]
    formats.write_labels_csv(os.path.join(root, "labels.csv"), cids, ciids,
                             dataset.cell_labels(weak=True))
    formats.write_labels_csv(os.path.join(root, "truth.csv"), cids, ciids, dataset.cell_labels())
    write_image_labels_csv(os.path.join(root, "image_labels.csv"), dataset.image_ids,
                           dataset.image_labels)
    rles = [formats.rle_encode(cell_mask(dataset, c)) for c in dataset.cells]
    formats.write_cells_csv(os.path.join(root, "cells.csv"), cids, ciids, rles)
    formats.write_ground_truth_csv(
        os.path.join(root, "ground_truth.csv"),
        [(c.image_id, c.cell_id, np.flatnonzero(c.labels).tolist(), r)
         for c, r in zip(dataset.cells, rles)])
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        for k, v in (manifest or {}).items():
            fh.write(f"{k} = {v}\n")


def write_image_labels_csv(path, image_ids, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", *formats.label_header()])
        for iid, row in zip(image_ids, labels):
            w.writerow([iid, *(formats.fmt(v) for v in row)])


def read_image_labels_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["image_id", *formats.label_header()]:
        raise ValueError(f"{path}: not an image labels CSV")
    return [r[0] for r in rows[1:]], np.array(
        [[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, formats.N_CLASSES)


def load_dataset(root, labels_path=None):
    """Read a dataset directory back into memory.

    ``labels_path`` overrides ``labels.csv`` as the source of weak labels (for
    example a relabelled CSV). Missing ``truth.csv`` leaves true labels at zero.
    """
    for required in ("images", "masks", "labels.csv", "image_labels.csv"):
        if not os.path.exists(os.path.join(root, required)):
            raise FileNotFoundError(os.path.join(root, required))
    image_ids, image_labels = read_image_labels_csv(os.path.join(root, "image_labels.csv"))
    images = np.stack([read_tensor(_path(root, "images", i)) for i in image_ids])
    label_maps = np.stack([read_tensor(_path(root, "masks", i)) for i in image_ids]).astype(
        np.int32)
    nuc_files = [_path(root, "nuclei", i) for i in image_ids]
    nuclei = (np.stack([read_tensor(p) for p in nuc_files]) > 0.5
              if all(os.path.exists(p) for p in nuc_files) else None)
    cids, ciids, weak = formats.read_labels_csv(labels_path or os.path.join(root, "labels.csv"))
    truth_path = os.path.join(root, "truth.csv")
    truth = {}
    if os.path.exists(truth_path):
        t_ids, _, t_lab = formats.read_labels_csv(truth_path)
        truth = dict(zip(t_ids, t_lab))
    rle_of = dict(zip(*formats.read_cells_csv(os.path.join(root, "cells.csv"))[::2]))
    index = {iid: n for n, iid in enumerate(image_ids)}
    cells = []
    for cid, iid, w in zip(cids, ciids, weak):
        n = index[iid]
        m = formats.rle_decode(rle_of[cid])
        ids = label_maps[n][m]
        label_id = int(ids[0]) if ids.size else 0
        rows, cols = np.nonzero(m)
        bbox = ((rows.min(), cols.min(), rows.max() + 1, cols.max() + 1) if rows.size
                else (0, 0, 0, 0))
        cells.append(CellRecord(cid, iid, n, label_id, tuple(int(b) for b in bbox),
                                truth.get(cid, np.zeros(formats.N_CLASSES)), w))
    return PhantomDataset(None, image_ids, image_labels, cells, images, label_maps, nuclei)


def load_probmaps(root, image_id):
    return read_tensor(_path(root, "probmaps", image_id))


def split_images(n_images, test_fraction=0.2, seed=0):
    """Deterministic image-level train/test split: (train_idx, test_idx), both sorted."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n_images)
    n_test = max(1, int(round(n_images * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def subset(dataset, image_idx):
    """Cells of the chosen images, as indices into ``dataset.cells``."""
    keep = set(int(i) for i in image_idx)
    return np.array([n for n, c in enumerate(dataset.cells) if c.image_index in keep], dtype=int)
