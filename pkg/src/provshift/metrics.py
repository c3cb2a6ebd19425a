"""Group-aware evaluation: accuracy, F1, AUPRC, and calibration error at
per-group, per-provenance, micro, macro, and worst levels, plus the OLS
line relating worst-group accuracy to the test split's log-alpha.

Conventions (the source protocols leave these open):
- AUPRC is the average-precision estimator with equal scores grouped.
- ECE uses 10 equal-width bins on the max-class probability.
- Groups are the four (y, z) cells; empty cells are excluded from the
  worst-group minimum and flagged rather than treated as 0.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .datamodel import GROUP_KEYS, empirical_joint
from .errors import RankDeficientError


@dataclass
class EvalReport:
    group_accuracy: dict
    group_counts: dict
    worst_group_accuracy: float
    # min over provenances of the provenance-level accuracy; unlike the
    # (y, z)-cell minimum this is sensitive to P(Y|Z) mixture shift, so
    # it is the quantity that moves in ID-vs-OOD comparisons and sweeps
    worst_provenance_accuracy: float
    per_provenance: dict  # z -> {"accuracy","f1","auprc","ece","count"}
    micro: dict
    macro: dict
    log_alpha: float
    flags: list = field(default_factory=list)

    def to_row(self):
        """Flat record with stable field names for CSV assembly."""
        row = {"log_alpha": self.log_alpha, "wga": self.worst_group_accuracy,
               "worst_provenance_accuracy": self.worst_provenance_accuracy}
        for (y, z) in GROUP_KEYS:
            acc = self.group_accuracy.get((y, z))
            row[f"acc_y{y}_z{z}"] = math.nan if acc is None else acc
            row[f"n_y{y}_z{z}"] = self.group_counts.get((y, z), 0)
        for z in (0, 1):
            for k in ("accuracy", "f1", "auprc", "ece"):
                v = self.per_provenance.get(z, {}).get(k)
                row[f"{k}_z{z}"] = math.nan if v is None else v
        for scope, d in (("micro", self.micro), ("macro", self.macro)):
            for k in ("accuracy", "f1", "auprc", "ece"):
                v = d.get(k)
                row[f"{scope}_{k}"] = math.nan if v is None else v
        return row


def accuracy(pred, y):
    return float(np.mean(pred == y))


def f1_score(pred, y):
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def auprc(scores, labels):
    """Average precision over descending-score thresholds; equal scores
    are grouped into one threshold. None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == len(labels):
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    ap = 0.0
    tp = 0
    fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp_add = int(np.sum(l[i:j] == 1))
        fp_add = (j - i) - tp_add
        tp += tp_add
        fp += fp_add
        if tp_add:
            precision = tp / (tp + fp)
            ap += precision * (tp_add / n_pos)
        i = j
    return float(ap)


def ece(probs, y, n_bins=10):
    """Expected calibration error on the max-class probability."""
    probs = np.asarray(probs, dtype=np.float64)
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(pred)), pred]
    correct = (pred == y).astype(np.float64)
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    total = len(conf)
    out = 0.0
    for b in range(n_bins):
        mask = bins == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        out += (nb / total) * abs(correct[mask].mean() - conf[mask].mean())
    return float(out)


def _scope_metrics(probs, y, flags, tag):
    pred = np.argmax(probs, axis=1)
    out = {
        "accuracy": accuracy(pred, y),
        "f1": f1_score(pred, y),
        "auprc": auprc(probs[:, 1], y),
        "ece": ece(probs, y),
        "count": len(y),
    }
    if out["auprc"] is None:
        flags.append(f"auprc-undefined:{tag}")
    return out


def evaluate(probs, dataset):
    """Full report from class probabilities aligned with the dataset."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) != len(dataset) or len(dataset) == 0:
        raise ValueError("predictions must align with a nonempty dataset")
    y = dataset.y
    z = dataset.z
    pred = np.argmax(probs, axis=1)

    flags = []
    group_accuracy = {}
    group_counts = {}
    for key in GROUP_KEYS:
        mask = (y == key[0]) & (z == key[1])
        group_counts[key] = int(mask.sum())
        if group_counts[key]:
            group_accuracy[key] = accuracy(pred[mask], y[mask])
        else:
            group_accuracy[key] = None
            flags.append(f"empty-group:{key}")
    nonempty = [v for v in group_accuracy.values() if v is not None]
    wga = min(nonempty)

    per_prov = {}
    for zv in (0, 1):
        mask = z == zv
        if mask.sum():
            per_prov[zv] = _scope_metrics(probs[mask], y[mask], flags, f"z{zv}")
        else:
            flags.append(f"empty-provenance:{zv}")
    micro = _scope_metrics(probs, y, flags, "micro")
    macro = {}
    for k in ("accuracy", "f1", "auprc", "ece"):
        vals = [per_prov[zv][k] for zv in per_prov if per_prov[zv][k] is not None]
        macro[k] = float(np.mean(vals)) if vals else None

    wpa = min(per_prov[zv]["accuracy"] for zv in per_prov)

    return EvalReport(
        group_accuracy=group_accuracy,
        group_counts=group_counts,
        worst_group_accuracy=float(wga),
        worst_provenance_accuracy=float(wpa),
        per_provenance=per_prov,
        micro=micro,
        macro=macro,
        log_alpha=empirical_joint(dataset).log_alpha,
        flags=flags,
    )


def fit_alpha_line(points):
    """OLS fit of (x, y) pairs -> (slope, intercept, r2).

    r2 = 1 - SS_res/SS_tot, with the convention r2 = 0 when the y values
    are constant (SS_tot = 0).
    """
    points = list(points)
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    if len(points) < 3 or len(np.unique(xs)) < 2:
        raise RankDeficientError(
            "rank-deficient: need >= 3 points with distinct abscissae"
        )
    xm, ym = xs.mean(), ys.mean()
    sxx = float(np.sum((xs - xm) ** 2))
    slope = float(np.sum((xs - xm) * (ys - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_res = float(np.sum((ys - (slope * xs + intercept)) ** 2))
    ss_tot = float(np.sum((ys - ym) ** 2))
    if ss_tot <= 0.0:
        r2 = 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return slope, intercept, r2
