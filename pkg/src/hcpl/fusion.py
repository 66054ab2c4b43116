"""Correlation-gated image/cell fusion, hierarchical ensembling and integrity weighting."""

import configparser
import csv
from dataclasses import dataclass, field

import numpy as np

N_CLASSES = 19
DEFAULT_RHO_TH = 0.2
DEFAULT_BINS = 20


class PearsonValue(float):
    """A float carrying ``undefined=True`` when either input was constant."""

    undefined = False


def pearson_r(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        out = PearsonValue(0.0)
        out.undefined = True
        return out
    return PearsonValue(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def histogram2d(a, b, bins=DEFAULT_BINS):
    """Counts on a ``bins`` x ``bins`` grid over [0, 1]^2; rows index ``a``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    if np.any((a < 0) | (a > 1) | (b < 0) | (b > 1)):
        raise ValueError("histogram2d values must lie in [0, 1]")
    counts, _, _ = np.histogram2d(a, b, bins=bins, range=[[0, 1], [0, 1]])
    return counts.astype(np.int64)


@dataclass
class CorrelationProfile:
    r: np.ndarray
    undefined: np.ndarray
    rho_th: float = DEFAULT_RHO_TH
    hist2d: np.ndarray = None

    def gate(self):
        """True where the product of image and cell predictions is used."""
        return (~np.asarray(self.undefined, bool)) & (np.asarray(self.r) >= self.rho_th)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "r", "undefined", "gated", "rho_th"])
            for c, (r, u, g) in enumerate(zip(self.r, self.undefined, self.gate())):
                w.writerow([c, repr(float(r)), int(u), int(g), repr(float(self.rho_th))])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        r = np.array([float(x["r"]) for x in rows])
        und = np.array([x["undefined"] == "1" for x in rows])
        rho = float(rows[0]["rho_th"]) if rows else DEFAULT_RHO_TH
        return cls(r, und, rho)


def correlation_profile(image_probs, cell_probs, image_labels, rho_th=DEFAULT_RHO_TH,
                        bins=DEFAULT_BINS):
    """Per-class Pearson r between the two streams.

    For class c only cells whose source image carries label c take part.
    """
    ip = np.asarray(image_probs, dtype=np.float64)
    cp = np.asarray(cell_probs, dtype=np.float64)
    lab = np.asarray(image_labels) > 0
    C = cp.shape[1]
    r = np.zeros(C)
    und = np.ones(C, dtype=bool)
    hist = np.zeros((C, bins, bins), dtype=np.int64)
    for c in range(C):
        sel = lab[:, c]
        if sel.sum() >= 2:
            v = pearson_r(ip[sel, c], cp[sel, c])
            r[c], und[c] = float(v), v.undefined
        if sel.any():
            hist[c] = histogram2d(ip[sel, c], cp[sel, c], bins)
    return CorrelationProfile(r, und, rho_th, hist)


def fuse_image_cell(img_p, cell_p, profile):
    """Product of the streams on gated classes, the cell prediction elsewhere."""
    img_p = np.asarray(img_p, dtype=np.float64)
    cell_p = np.asarray(cell_p, dtype=np.float64)
    return np.where(profile.gate(), img_p * cell_p, cell_p)


def write_histograms_csv(path, profile):
    bins = profile.hist2d.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "image_bin", "cell_bin", "count"])
        for c in range(profile.hist2d.shape[0]):
            for i in range(bins):
                for j in range(bins):
                    if profile.hist2d[c, i, j]:
                        w.writerow([c, i, j, int(profile.hist2d[c, i, j])])


# --- ensembling -------------------------------------------------------------------------

@dataclass
class EnsembleSpec:
    """Named groups of model references; all members of a group share a family tag."""

    groups: dict
    families: dict = field(default_factory=dict)
    rho_th: float = DEFAULT_RHO_TH
    vid: str = None

    def validate(self):
        if not self.groups:
            raise ValueError("ensemble needs at least one group")
        for name, members in self.groups.items():
            if not members:
                raise ValueError(f"group {name!r} is empty")

    @classmethod
    def read(cls, path):
        """Plain-text spec::

            [ensemble]
            rho_th = 0.2
            vid = models/vid            # optional

            [group cla]
            family = cla
            models = models/cla_a, models/cla_b
        """
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.optionxform = str
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
        groups, fams = {}, {}
        for sec in cp.sections():
            if sec.startswith("group "):
                name = sec[len("group "):].strip()
                groups[name] = [m.strip() for m in cp[sec].get("models", "").split(",")
                                if m.strip()]
                fams[name] = cp[sec].get("family", name)
        ens = cp["ensemble"] if cp.has_section("ensemble") else {}
        spec = cls(groups, fams, float(ens.get("rho_th", DEFAULT_RHO_TH)),
                   ens.get("vid") or None)
        spec.validate()
        return spec

    def write(self, path):
        lines = ["[ensemble]", f"rho_th = {self.rho_th!r}"]
        if self.vid:
            lines.append(f"vid = {self.vid}")
        for name, members in self.groups.items():
            lines += ["", f"[group {name}]", f"family = {self.families.get(name, name)}",
                      "models = " + ", ".join(members)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def ensemble_hierarchical(spec, matrices):
    """Mean within each group, then mean over the group means.

    ``matrices`` maps each model reference in ``spec`` to an (N, C) array.
    """
    spec.validate()
    means = []
    shape = None
    for name, members in spec.groups.items():
        mats = []
        for m in members:
            if m not in matrices:
                raise KeyError(f"no predictions for model {m!r}")
            a = np.asarray(matrices[m], dtype=np.float64)
            if shape is not None and a.shape != shape:
                raise ValueError(f"{m}: shape {a.shape} does not match {shape}")
            shape = a.shape
            mats.append(a)
        means.append(_mean(mats))
    return _mean(means)


def _mean(arrays):
    # offset form: the mean of identical arrays is returned exactly
    base = arrays[0]
    return base + np.mean([a - base for a in arrays], axis=0)


def apply_vid(matrix, weights):
    """Scale each cell's row by its integrity weight."""
    matrix = np.asarray(matrix, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (matrix.shape[0],):
        raise ValueError(f"need one weight per cell ({matrix.shape[0]}), got {weights.shape}")
    return matrix * weights[:, None]
