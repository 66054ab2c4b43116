"""Cell relabelling: committee-averaged confidences replace positive weak labels."""

import csv
from dataclasses import dataclass, field

import numpy as np

HIST_BINS = 10


@dataclass
class CraConfig:
    beta: float = 0.5
    rounds: int = 2
    committee: int = 3

    def validate(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.rounds < 0 or self.committee < 1:
            raise ValueError("rounds must be >= 0 and committee >= 1")


def combine_confidences(matrices):
    """Elementwise mean of equally shaped (N, C) prediction arrays."""
    mats = [np.asarray(getattr(m, "cell_probs", m), dtype=np.float64) for m in matrices]
    if not mats:
        raise ValueError("empty committee")
    ids = [getattr(m, "cell_ids", None) for m in matrices]
    if any(i is not None and list(i) != list(ids[0]) for i in ids):
        raise ValueError("committee matrices list cells in different orders")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("committee matrices differ in shape")
    # offset form keeps the mean of identical members exact
    base = mats[0]
    return base + np.mean([m - base for m in mats], axis=0)


def power_transform(c, beta):
    c = np.asarray(c, dtype=np.float64)
    return np.clip(c, 0.0, 1.0) ** beta


def relabel_round(weak_labels, committee, cfg):
    """Soft labels from one committee; entries with a zero weak label stay zero."""
    weak = np.asarray(weak_labels, dtype=np.float64)
    conf = combine_confidences(committee)
    if conf.shape != weak.shape:
        raise ValueError(f"committee covers {conf.shape}, labels are {weak.shape}")
    if not np.all(np.isfinite(conf)):
        raise ValueError("committee prediction missing for some cells")
    return np.where(weak > 0, power_transform(conf, cfg.beta), 0.0)


def label_histogram(soft, weak_mask, bins=HIST_BINS):
    """Counts of soft values on the weakly positive entries, ``bins`` equal bins on [0, 1]."""
    vals = np.asarray(soft)[np.asarray(weak_mask, dtype=bool)]
    counts, _ = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return counts


@dataclass
class CraResult:
    labels: np.ndarray
    rounds: list = field(default_factory=list)  # soft labels after each round
    histograms: list = field(default_factory=list)  # index 0 is the weak labels
    committees: list = field(default_factory=list)


def run_cra(weak_labels, trainer, cfg):
    """Alternate committee training and relabelling for ``cfg.rounds`` rounds.

    ``trainer(labels, round_index, member_index)`` returns that member's (N, C)
    confidences after training on ``labels``. The positive set is fixed by the
    original weak labels throughout.
    """
    cfg.validate()
    weak = np.asarray(weak_labels, dtype=np.float64)
    mask = weak > 0
    labels = weak.copy()
    res = CraResult(labels, histograms=[label_histogram(weak, mask)])
    for r in range(cfg.rounds):
        committee = [trainer(labels, r, k) for k in range(cfg.committee)]
        labels = relabel_round(mask.astype(np.float64), committee, cfg)
        res.rounds.append(labels)
        res.histograms.append(label_histogram(labels, mask))
        res.committees.append(committee)
    res.labels = labels
    return res


def write_histograms_csv(path, histograms, bins=HIST_BINS):
    edges = np.linspace(0.0, 1.0, bins + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "bin_lo", "bin_hi", "count"])
        for r, counts in enumerate(histograms):
            for b, n in enumerate(counts):
                w.writerow([r, f"{edges[b]:.2f}", f"{edges[b + 1]:.2f}", int(n)])
