"""Command-line entry point: ``hcpl <command> [options]``.

Exit codes: 0 success, 2 bad configuration, 3 missing input, 4 numeric failure.
Every command writes ``run_manifest.txt`` into its output directory.
"""

import argparse
import dataclasses
import hashlib
import logging
import os
import platform
import sys
import time

import numpy as np
import scipy

import hcpl
from hcpl import autodiff as ad
from hcpl import cra, evaluation, fusion, kernels, layers, models, segmentation, vid
from hcpl.autodiff import Tensor
from hcpl.data import augment as aug
from hcpl.data import dataset as dio
from hcpl.data import formats, phantom
from hcpl.data.tensorfile import TensorFileError, read_tensor, write_tensor

log = logging.getLogger("hcpl")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4
MANIFEST = "run_manifest.txt"
SPLIT_FILE = "split.txt"


class ConfigError(Exception):
    pass


class MissingInput(Exception):
    pass


# --- config helpers -----------------------------------------------------------------------

class Config:
    """Sectioned key/value settings with typed, checked access."""

    def __init__(self, sections=None, path=None):
        self.sections = sections or {}
        self.path = path
        self.used = set()

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        if not os.path.exists(path):
            raise MissingInput(f"config file not found: {path}")
        try:
            return cls(formats.read_config(path), path)
        except Exception as exc:  # configparser raises several unrelated types
            raise ConfigError(f"{path}: {exc}") from exc

    def get(self, section, key, kind, default):
        raw = self.sections.get(section, {}).get(key)
        self.used.add((section, key))
        if raw is None:
            return default
        try:
            if kind is bool:
                if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                return raw.lower() in ("1", "true", "yes", "on")
            if kind is tuple:
                return tuple(int(v) for v in raw.split(","))
            return kind(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: expected {kind.__name__}") from exc

    def check_unused(self, *sections):
        for sec in sections:
            for key in self.sections.get(sec, {}):
                if (sec, key) not in self.used:
                    raise ConfigError(f"unknown key [{sec}] {key}")

    def digest(self):
        text = repr(sorted((s, sorted(kv.items())) for s, kv in self.sections.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _phantom_config(cfg, seed):
    weights = phantom.default_class_weights()
    raw = cfg.sections.get("phantom", {}).get("class_weights")
    cfg.used.add(("phantom", "class_weights"))
    if raw is not None:
        weights = np.zeros(phantom.N_CLASSES)
        try:
            for item in raw.split(","):
                k, v = item.split(":")
                weights[int(k)] = float(v)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"[phantom] class_weights: {exc}") from exc
    d = phantom.PhantomConfig()
    pc = phantom.PhantomConfig(
        n_images=cfg.get("phantom", "n_images", int, d.n_images),
        image_size=cfg.get("phantom", "image_size", int, d.image_size),
        cells_per_image=cfg.get("phantom", "cells_per_image", int, d.cells_per_image),
        class_weights=weights,
        max_classes_per_image=cfg.get("phantom", "max_classes_per_image", int,
                                      d.max_classes_per_image),
        express_prob=cfg.get("phantom", "express_prob", float, d.express_prob),
        texture_strength=cfg.get("phantom", "texture_strength", float, d.texture_strength),
        noise=cfg.get("phantom", "noise", float, d.noise),
        seed=seed if seed is not None else cfg.get("phantom", "seed", int, d.seed),
    )
    try:
        pc.validate()
    except phantom.PhantomError as exc:
        raise ConfigError(str(exc)) from exc
    return pc


def _model_config(cfg, family):
    d = models.ModelConfig()
    mc = models.ModelConfig(
        family=family,
        stage_widths=cfg.get("model", "stage_widths", tuple, d.stage_widths),
        scat_J=cfg.get("model", "scat_J", int, d.scat_J),
        scat_L=cfg.get("model", "scat_L", int, d.scat_L),
        weibull_lam=cfg.get("model", "weibull_lam", float, d.weibull_lam),
        weibull_zeta=cfg.get("model", "weibull_zeta", float, d.weibull_zeta),
        weibull_gamma=cfg.get("model", "weibull_gamma", float, d.weibull_gamma),
        weibull_eta=cfg.get("model", "weibull_eta", float, d.weibull_eta),
    )
    try:
        mc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return mc


def _train_config(cfg, seed, epochs=None):
    d = models.TrainConfig()
    tc = models.TrainConfig(
        lr0=cfg.get("train", "lr0", float, d.lr0),
        lr_min_ratio=cfg.get("train", "lr_min_ratio", float, d.lr_min_ratio),
        scalar_lr_scale=cfg.get("train", "scalar_lr_scale", float, d.scalar_lr_scale),
        epochs=epochs if epochs is not None else cfg.get("train", "epochs", int, d.epochs),
        batch_size=cfg.get("train", "batch_size", int, d.batch_size),
        loss=cfg.get("train", "loss", str, d.loss),
        focal_gamma=cfg.get("train", "focal_gamma", float, d.focal_gamma),
        W1=cfg.get("train", "W1", float, d.W1),
        W2=cfg.get("train", "W2", float, d.W2),
        augment=(aug.AugmentConfig() if cfg.get("train", "augment", bool, True)
                 else aug.AugmentConfig.off()),
        seed=seed if seed is not None else cfg.get("train", "seed", int, d.seed),
    )
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return tc


# --- data helpers ---------------------------------------------------------------------------

def _require(path):
    if not os.path.exists(path):
        raise MissingInput(path)
    return path


def _test_images(root):
    path = os.path.join(root, SPLIT_FILE)
    if not os.path.exists(path):
        return set()
    with open(path) as fh:
        return {line.strip() for line in fh if line.strip()}


def _load_dataset(root, labels=None):
    _require(root)
    if labels is not None:
        _require(labels)
    try:
        return dio.load_dataset(root, labels)
    except FileNotFoundError as exc:
        raise MissingInput(str(exc)) from exc


class Cells:
    """Cells to score: ids, source images, masks (RLE) and 32x32 tiles."""

    def __init__(self, ids, image_ids, rles, tiles, masks, groups):
        self.ids, self.image_ids, self.rles = ids, image_ids, rles
        self.tiles, self.masks, self.groups = tiles, masks, groups

    @classmethod
    def load(cls, data_root, cells_csv=None, split="all"):
        path = _require(cells_csv or os.path.join(data_root, "cells.csv"))
        ids, iids, rles = formats.read_cells_csv(path)
        test = _test_images(data_root)
        keep = [k for k, iid in enumerate(iids) if split == "all"
                or (split == "test") == (iid in test)]
        ids = [ids[k] for k in keep]
        iids = [iids[k] for k in keep]
        rles = [rles[k] for k in keep]
        order = {iid: n for n, iid in enumerate(dict.fromkeys(iids))}
        tiles = np.zeros((len(ids), 4, 32, 32))
        masks = np.zeros((len(ids), 32, 32), dtype=bool)
        images = {}
        for n, (iid, rle) in enumerate(zip(iids, rles)):
            if iid not in images:
                images[iid] = read_tensor(_require(os.path.join(data_root, "images",
                                                                f"{iid}.hcpl")))
            tiles[n], masks[n] = phantom.cell_tile(images[iid], formats.rle_decode(rle))
        groups = np.array([order[i] for i in iids], dtype=int)
        return cls(ids, iids, rles, tiles, masks, groups)


def _training_cells(ds, test, split="train"):
    """Cells of non-test images (or all cells) with their weak labels as targets."""
    idx = np.array([n for n, c in enumerate(ds.cells)
                    if split == "all" or c.image_id not in test], dtype=int)
    tiles, masks = phantom.dataset_tiles(ds)
    weak = ds.cell_labels(weak=True)
    groups = np.array([c.image_index for c in ds.cells])
    image_targets = {int(g): ds.image_labels[g] for g in np.unique(groups[idx])}
    return idx, models.CellData(tiles[idx], masks[idx], weak[idx], groups[idx], image_targets)


# --- manifest -------------------------------------------------------------------------------

def _versions():
    return (f"hcpl {hcpl.__version__}; python {platform.python_version()}; "
            f"numpy {np.__version__}; scipy {scipy.__version__}; kernels {kernels.BACKEND}")


def write_manifest(out, command, cfg, seed, inputs, outputs, t0, extra=None):
    os.makedirs(out, exist_ok=True)
    lines = [
        f"command = {command}",
        f"config_hash = {cfg.digest()}",
        f"seed = {seed}",
        "inputs = " + ", ".join(str(i) for i in inputs if i is not None),
        "outputs = " + ", ".join(str(o) for o in outputs),
        f"wall_time_s = {time.perf_counter() - t0:.3f}",
        f"versions = {_versions()}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    with open(os.path.join(out, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# --- commands -------------------------------------------------------------------------------

def cmd_synth(args, cfg):
    t0 = time.perf_counter()
    pc = _phantom_config(cfg, args.seed)
    test_fraction = cfg.get("split", "test_fraction", float, 0.2)
    split_seed = cfg.get("split", "seed", int, pc.seed)
    cfg.check_unused("phantom", "split")
    if not 0 < test_fraction < 1:
        raise ConfigError("[split] test_fraction must lie in (0, 1)")
    ds = phantom.generate_phantom(pc)
    dio.save_dataset(ds, args.out, manifest={
        "n_images": pc.n_images, "image_size": pc.image_size,
        "cells_per_image": pc.cells_per_image, "seed": pc.seed,
        "overlabel_rate": formats.fmt(phantom.measured_overlabel_rate(ds))})
    _, test = dio.split_images(pc.n_images, test_fraction, split_seed)
    with open(os.path.join(args.out, SPLIT_FILE), "w") as fh:
        fh.writelines(f"{ds.image_ids[i]}\n" for i in test)
    print(f"wrote {pc.n_images} images, {len(ds.cells)} cells to {args.out}")
    write_manifest(args.out, "synth", cfg, pc.seed, [cfg.path], [args.out], t0)


def cmd_segment(args, cfg):
    t0 = time.perf_counter()
    d = segmentation.SegConfig()
    sc = segmentation.SegConfig(
        t_nuc=cfg.get("segment", "t_nuc", float, d.t_nuc),
        t_cell=cfg.get("segment", "t_cell", float, d.t_cell),
        min_area=cfg.get("segment", "min_area", int, d.min_area),
        fast=not args.full, compare=args.compare,
        opening=cfg.get("segment", "opening", bool, d.opening))
    cfg.check_unused("segment")
    ids, _ = dio.read_image_labels_csv(_require(os.path.join(args.data, "image_labels.csv")))
    os.makedirs(os.path.join(args.out, "labels"), exist_ok=True)
    cids, ciids, rles, report = [], [], [], []
    for iid in ids:
        maps = read_tensor(_require(os.path.join(args.data, "probmaps", f"{iid}.hcpl")))
        try:
            res = segmentation.segment_pipeline(maps[0], maps[1], sc)
        except ValueError as exc:
            raise ConfigError(f"{iid}: {exc}") from exc
        write_tensor(os.path.join(args.out, "labels", f"{iid}.hcpl"), res.labels)
        for k in range(1, res.n_instances + 1):
            cids.append(f"{iid}_s{k}")
            ciids.append(iid)
            rles.append(formats.rle_encode(res.labels == k))
        r = res.report
        row = [iid, res.n_instances, r.instances_before, r.opened_pixels, r.removed_pixels]
        if sc.compare:
            c = res.comparison
            row += [c["full_instances"], c["count_delta"], f"{c['mean_iou']:.6f}"]
        report.append(row)
    formats.write_cells_csv(os.path.join(args.out, "cells.csv"), cids, ciids, rles)
    header = ["image_id", "instances", "raw_instances", "opened_pixels", "removed_pixels"]
    if sc.compare:
        header += ["full_instances", "count_delta", "matched_iou"]
    with open(os.path.join(args.out, "segment_report.csv"), "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in report:
            fh.write(",".join(str(v) for v in row) + "\n")
    print(f"segmented {len(ids)} images into {len(cids)} cells")
    write_manifest(args.out, "segment", cfg, args.seed, [args.data, cfg.path],
                   [os.path.join(args.out, "cells.csv")], t0)


def cmd_train(args, cfg):
    t0 = time.perf_counter()
    seed = args.seed if args.seed is not None else cfg.get("train", "seed", int, 0)
    ds = _load_dataset(args.data, args.labels)
    test = _test_images(args.data)
    fam = args.family
    if fam in models.FAMILIES:
        mc = _model_config(cfg, fam)
        tc = _train_config(cfg, seed, args.epochs)
        cfg.check_unused("model", "train")
        idx, data = _training_cells(ds, test, args.split)
        model = models.build_model(mc, seed)
        bundle = models.train(model, data, tc, mc, log=log.info)
        bundle.save(args.out)
        if fam == "dsa":
            pm = models.predict(bundle, data)
            lab = np.stack([data.image_targets[g] for g in data.groups])
            rho = cfg.get("fusion", "rho_th", float, fusion.DEFAULT_RHO_TH)
            prof = fusion.correlation_profile(pm.image_probs, pm.cell_probs, lab, rho)
            prof.write_csv(os.path.join(args.out, "profile.csv"))
            fusion.write_histograms_csv(os.path.join(args.out, "profile_hist2d.csv"), prof)
        print(f"trained {fam} on {len(data)} cells; final loss {bundle.loss_trace[-1]:.5f}"
              if bundle.loss_trace else f"built {fam} with 0 epochs")
    else:
        n = cfg.get("vid", "n_samples", int, 2000)
        epochs = args.epochs if args.epochs is not None else cfg.get("vid", "epochs", int, 15)
        lr0 = cfg.get("vid", "lr0", float, 5e-3)
        gc = vid.GbtConfig(n_trees=cfg.get("vid", "n_trees", int, 100),
                           max_depth=cfg.get("vid", "max_depth", int, 3), seed=seed)
        cfg.check_unused("vid")
        idx, data = _training_cells(ds, test, args.split)
        if fam == "crop":
            X, y, _ = vid.crop_training_set(data.tiles, data.masks, n, seed)
            model, trace = vid.train_crop_model(X, y, epochs, lr0, seed=seed, log=log.info)
            vid.save_crop_model(model, args.out)
            print(f"trained crop model on {n} crops; final loss {trace[-1]:.5f}"
                  if trace else "built crop model with 0 epochs")
        else:
            X, y = vid.morph_training_set(data.tiles, data.masks, n, seed)
            os.makedirs(args.out, exist_ok=True)
            model = vid.gbt_train(X, y, gc)
            model.save(os.path.join(args.out, "gbt.txt"))
            acc = float(np.mean(model.predict(X) == y))
            print(f"trained boosted trees on {n} samples; training accuracy {acc:.4f}")
    write_manifest(args.out, f"train {fam}", cfg, seed, [args.data, args.labels, cfg.path],
                   [args.out], t0)


def _load_bundle(path):
    try:
        return models.ModelBundle.load(_require(path))
    except (FileNotFoundError, TensorFileError) as exc:
        raise MissingInput(f"cannot load model {path}: {exc}") from exc


def cmd_infer(args, cfg):
    t0 = time.perf_counter()
    rho = cfg.get("fusion", "rho_th", float, fusion.DEFAULT_RHO_TH)
    cfg.check_unused("fusion")
    bundle = _load_bundle(args.model)
    cells = Cells.load(args.data, args.cells, args.split)
    data = models.CellData(cells.tiles, cells.masks, groups=cells.groups)
    t1 = time.perf_counter()
    pm = models.predict(bundle, data, cells.ids)
    per_cell = (time.perf_counter() - t1) / max(len(cells.ids), 1)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "predictions.csv")
    final = pm.cell_probs
    if bundle.family == "dsa":
        prof = fusion.CorrelationProfile.read_csv(_require(os.path.join(args.model,
                                                                        "profile.csv")))
        prof.rho_th = rho
        prof.write_csv(os.path.join(args.out, "profile.csv"))
        formats.write_predictions_csv(os.path.join(args.out, "cell_predictions.csv"),
                                      cells.ids, pm.cell_probs)
        formats.write_predictions_csv(os.path.join(args.out, "image_predictions.csv"),
                                      cells.ids, pm.image_probs)
        final = fusion.fuse_image_cell(pm.image_probs, pm.cell_probs, prof)
    formats.write_predictions_csv(out, cells.ids, final)
    with open(os.path.join(args.out, "family.txt"), "w") as fh:
        fh.write(bundle.family + "\n")
    print(f"scored {len(cells.ids)} cells with {bundle.family}; {per_cell * 1e3:.2f} ms per cell")
    write_manifest(args.out, "infer", cfg, bundle.seed, [args.model, args.data, args.cells],
                   [out], t0, {"per_cell_s": f"{per_cell:.6f}"})


def _read_member(path, rho_th):
    pred = _require(os.path.join(path, "predictions.csv"))
    parts = [os.path.join(path, f) for f in ("profile.csv", "cell_predictions.csv",
                                             "image_predictions.csv")]
    if all(os.path.exists(p) for p in parts):
        prof = fusion.CorrelationProfile.read_csv(parts[0])
        prof.rho_th = rho_th
        ids, cp = formats.read_predictions_csv(parts[1])
        ids2, ip = formats.read_predictions_csv(parts[2])
        if ids != ids2:
            raise ConfigError(f"{path}: cell and image prediction files disagree")
        return ids, fusion.fuse_image_cell(ip, cp, prof)
    return formats.read_predictions_csv(pred)


def cmd_ensemble(args, cfg):
    t0 = time.perf_counter()
    try:
        spec = fusion.EnsembleSpec.read(_require(args.spec))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(args.spec))
    resolve = lambda p: p if os.path.isabs(p) else os.path.join(base, p)  # noqa: E731
    mats, ids = {}, None
    for members in spec.groups.values():
        for m in members:
            mids, mat = _read_member(resolve(m), spec.rho_th)
            if ids is not None and mids != ids:
                raise ConfigError(f"{m}: cell ids differ from the other members")
            ids, mats[m] = mids, mat
    final = fusion.ensemble_hierarchical(spec, mats)
    os.makedirs(args.out, exist_ok=True)
    outs = [os.path.join(args.out, "predictions.csv")]
    if spec.vid:
        refs = [r.strip() for r in spec.vid.split(",")]
        if len(refs) != 2:
            raise ConfigError("vid must name a boosted-tree model and a crop model")
        gbt = vid.GbtModel.load(_require(os.path.join(resolve(refs[0]), "gbt.txt")))
        crop = vid.load_crop_model(_require(resolve(refs[1])))
        cells = Cells.load(_require(args.data), args.cells, "all")
        pos = {c: n for n, c in enumerate(cells.ids)}
        if any(c not in pos for c in ids):
            raise ConfigError("predictions refer to cells absent from the cell table")
        sel = np.array([pos[c] for c in ids], dtype=int)
        tiles, masks = cells.tiles[sel], cells.masks[sel]
        feats = np.array([vid.morph_features(m, t).vector() for t, m in zip(tiles, masks)])
        good = gbt.predict_proba(feats)
        crop_p = vid.crop_ratio_classify(crop, tiles)
        w = vid.vid_weight(good, crop_p)
        final = fusion.apply_vid(final, w)
        path = os.path.join(args.out, "vid_scores.csv")
        with open(path, "w") as fh:
            fh.write("cell_id,good,crop1,crop2,crop3,crop4,weight\n")
            for c, g, cp, wt in zip(ids, good, crop_p, w):
                fh.write(",".join([c, formats.fmt(g), *(formats.fmt(v) for v in cp),
                                   formats.fmt(wt)]) + "\n")
        outs.append(path)
    formats.write_predictions_csv(outs[0], ids, final)
    print(f"ensembled {len(mats)} models in {len(spec.groups)} groups over {len(ids)} cells")
    write_manifest(args.out, "ensemble", cfg, args.seed, [args.spec, args.data], outs, t0)


def cmd_relabel(args, cfg):
    t0 = time.perf_counter()
    seed = args.seed if args.seed is not None else cfg.get("train", "seed", int, 0)
    cc = cra.CraConfig(beta=cfg.get("cra", "beta", float, 0.5),
                       rounds=args.rounds if args.rounds is not None
                       else cfg.get("cra", "rounds", int, 1),
                       committee=cfg.get("cra", "committee", int, 3))
    family = cfg.get("cra", "family", str, "cla")
    mc = _model_config(cfg, family)
    tc = _train_config(cfg, seed, args.epochs)
    cfg.check_unused("cra", "model", "train")
    try:
        cc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    labels_in = args.labels or os.path.join(args.data, "labels.csv")
    ds = _load_dataset(args.data, labels_in)
    idx, data = _training_cells(ds, _test_images(args.data), "train")
    weak_all = ds.cell_labels(weak=True)

    def trainer(labels, r, k):
        member = models.CellData(data.tiles, data.masks, labels, data.groups,
                                 data.image_targets)
        tcm = dataclasses.replace(tc, seed=seed + 1000 * r + k)
        bundle = models.train(models.build_model(mc, tcm.seed), member, tcm, mc,
                              log=log.info)
        return models.predict(bundle, member).cell_probs

    res = cra.run_cra(weak_all[idx], trainer, cc)
    out_labels = weak_all.copy()
    out_labels[idx] = res.labels
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "labels.csv")
    formats.write_labels_csv(path, [c.cell_id for c in ds.cells],
                             [c.image_id for c in ds.cells], out_labels)
    cra.write_histograms_csv(os.path.join(args.out, "histograms.csv"), res.histograms)
    print(f"relabelled {len(idx)} training cells over {cc.rounds} rounds")
    write_manifest(args.out, "relabel", cfg, seed, [args.data, labels_in, cfg.path], [path], t0)


def cmd_evaluate(args, cfg):
    t0 = time.perf_counter()
    iou_th = cfg.get("evaluate", "iou_th", float, evaluation.IOU_TH)
    exclude = cfg.get("evaluate", "exclude_absent", bool, True)
    cfg.check_unused("evaluate")
    pred = args.pred
    if os.path.isdir(pred):
        pred = os.path.join(pred, "predictions.csv")
    ids, probs = formats.read_predictions_csv(_require(pred))
    cids, ciids, rles = formats.read_cells_csv(
        _require(args.cells or os.path.join(args.data, "cells.csv")))
    where = dict(zip(cids, zip(ciids, rles)))
    missing = [c for c in ids if c not in where]
    if missing:
        raise ConfigError(f"{len(missing)} predicted cells absent from the cell table")
    test = _test_images(args.data)
    gts = []
    for iid, cid, classes, rle in formats.read_ground_truth_csv(
            _require(os.path.join(args.data, "ground_truth.csv"))):
        if args.split == "all" or (args.split == "test") == (iid in test):
            gts.append(evaluation.GroundTruthCell(iid, cid, classes, rle))
    images = {g.image_id for g in gts}
    keep = [n for n, c in enumerate(ids) if where[c][0] in images]
    dets = evaluation.detections_from_predictions(
        [ids[n] for n in keep], probs[keep], where)
    res = evaluation.map19(dets, gts, iou_th=iou_th, exclude_absent=exclude)
    os.makedirs(args.out, exist_ok=True)
    res.write_csv(os.path.join(args.out, "ap.csv"), phantom.CLASS_NAMES)
    lines = [f"class {c:2d} {phantom.CLASS_NAMES[c]:<24s} AP {ap:.4f}"
             for c, ap in enumerate(res.per_class) if res.included[c]]
    lines.append(res.summary())
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    write_manifest(args.out, "evaluate", cfg, args.seed, [pred, args.data],
                   [os.path.join(args.out, "ap.csv")], t0)


def cmd_cam(args, cfg):
    t0 = time.perf_counter()
    cfg.check_unused()
    bundle = _load_bundle(args.model)
    if bundle.family == "clh":
        raise ConfigError("class activation maps need a convolutional feature grid (cla/dsa)")
    cells = Cells.load(args.data, args.cells, "all")
    if args.cell not in cells.ids:
        raise MissingInput(f"cell {args.cell!r} not found")
    k = cells.ids.index(args.cell)
    if not 0 <= args.cls < models.N_CLASSES:
        raise ConfigError(f"class {args.cls} out of range")
    heat = layers.grad_cam(bundle.model, Tensor(cells.tiles[k:k + 1]), args.cls)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"cam_{args.cell}_c{args.cls}")
    write_tensor(stem + ".hcpl", heat)
    outs = [stem + ".hcpl"]
    if args.png:
        from PIL import Image

        scale = cells.tiles.shape[-1] // heat.shape[-1]
        up = np.kron(heat, np.ones((scale, scale)))
        Image.fromarray(np.round(up * 255).astype(np.uint8)).save(stem + ".png")
        outs.append(stem + ".png")
    r, c = (int(v) for v in np.unravel_index(int(np.argmax(heat)), heat.shape))
    print(f"heatmap {heat.shape[0]}x{heat.shape[1]} peak at ({r}, {c})")
    write_manifest(args.out, "cam", cfg, bundle.seed, [args.model, args.data], outs, t0)


# --- parser ---------------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key/value settings file")
    common.add_argument("--seed", type=int, help="override the random seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="hcpl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hcpl {hcpl.__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a phantom dataset")

    s = sub.add_parser("segment", parents=[common], help="probability maps to cell instances")
    s.add_argument("--data", required=True)
    s.add_argument("--full", action="store_true", help="full resolution instead of half")
    s.add_argument("--compare", action="store_true", help="also run the other path and compare")

    s = sub.add_parser("train", parents=[common], help="train a classifier or VID model")
    s.add_argument("--family", required=True, choices=[*models.FAMILIES, "crop", "gbt"])
    s.add_argument("--data", required=True)
    s.add_argument("--labels", help="labels CSV overriding the dataset's weak labels")
    s.add_argument("--epochs", type=int)
    s.add_argument("--split", choices=["train", "all"], default="train")

    s = sub.add_parser("relabel", parents=[common], help="committee relabelling")
    s.add_argument("--data", required=True)
    s.add_argument("--labels")
    s.add_argument("--rounds", type=int)
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("infer", parents=[common], help="score cells with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--cells", help="cell table (default: the dataset's cells.csv)")
    s.add_argument("--split", choices=["all", "train", "test"], default="all")

    s = sub.add_parser("ensemble", parents=[common], help="combine prediction directories")
    s.add_argument("--spec", required=True)
    s.add_argument("--data", help="dataset directory (needed for VID weighting)")
    s.add_argument("--cells")

    s = sub.add_parser("evaluate", parents=[common], help="per-class AP and mAP")
    s.add_argument("--pred", required=True, help="predictions CSV or directory")
    s.add_argument("--data", required=True)
    s.add_argument("--cells")
    s.add_argument("--split", choices=["all", "train", "test"], default="all")

    s = sub.add_parser("cam", parents=[common], help="class activation heatmap for one cell")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--cells")
    s.add_argument("--cell", required=True)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--png", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "segment": cmd_segment, "train": cmd_train,
            "relabel": cmd_relabel, "infer": cmd_infer, "ensemble": cmd_ensemble,
            "evaluate": cmd_evaluate, "cam": cmd_cam}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get("HCPL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = Config.load(args.config)
        with np.errstate(over="ignore", under="ignore"):
            COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
