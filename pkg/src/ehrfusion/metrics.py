"""Ranking metrics, DeLong's paired AUC test, and the LR baseline.

AUC uses the Mann-Whitney formulation with tie handling via midranks; AUPRC
is the precision step-curve area (average-precision style, ties grouped);
DeLong's test uses the fast structural-components method over placement
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cohort import FoldData
from .train import AdamW


def _midranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0/1")
    return n_pos, n_neg


def auc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), computed exactly via midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _midranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Area under the precision-recall step curve, ties grouped."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, _ = _check_binary(labels)
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    area = 0.0
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp_gain = int(y[i:j + 1].sum())
        fp_gain = (j - i + 1) - tp_gain
        tp += tp_gain
        fp += fp_gain
        precision = tp / (tp + fp)
        area += (tp_gain / n_pos) * precision
        i = j + 1
    return float(area)


def _placements(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """DeLong structural components (V10 over positives, V01 over negatives)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = pos.size, neg.size
    tz = _midranks(np.concatenate([pos, neg]))
    tx = _midranks(pos)
    ty = _midranks(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    theta = float((tz[:m].sum() / (m * n)) - (m + 1) / (2.0 * n))
    return v10, v01, theta


def delong_test(scores_a, scores_b, labels) -> tuple[float, float, float]:
    """Two-sided p-value for paired AUC difference, plus both AUCs.

    Identical score vectors (zero-variance difference) give p = 1 by
    convention.
    """
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    labels = np.asarray(labels)
    if scores_a.shape != scores_b.shape or scores_a.shape != labels.shape:
        raise ValueError("paired scores must align with labels")
    n_pos, n_neg = _check_binary(labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("DeLong needs both classes present")
    v10a, v01a, auc_a = _placements(scores_a, labels)
    v10b, v01b, auc_b = _placements(scores_b, labels)
    s10 = np.cov(np.stack([v10a, v10b]), ddof=1)
    s01 = np.cov(np.stack([v01a, v01b]), ddof=1)
    s = s10 / n_pos + s01 / n_neg
    var_diff = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])
    if var_diff <= 0.0 or np.array_equal(scores_a, scores_b):
        return 1.0, auc_a, auc_b
    z = (auc_a - auc_b) / math.sqrt(var_diff)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return float(min(max(p, 0.0), 1.0)) or 1e-300, auc_a, auc_b


# ---------------------------------------------------------------------------
# logistic-regression baseline


def lr_baseline(data: FoldData, seed: int = 0, steps: int = 400,
                lr: float = 0.05, l2: float = 1e-3) -> dict[str, np.ndarray]:
    """Logistic regression on flat per-patient features; test probabilities.

    Features are per-lab summary statistics plus code-presence indicators
    (see cohort.lr_feature_names), standardized on the training partition.
    Trained full-batch with the same optimizer machinery as the main model.
    """
    x_train = np.stack([data.features[p.id] for p in data.train])
    y_train = np.array([p.label for p in data.train], dtype=float)
    mu = x_train.mean(axis=0)
    sd = np.maximum(x_train.std(axis=0), 1e-9)

    def design(patients):
        x = np.stack([data.features[p.id] for p in patients])
        return (x - mu) / sd

    xt = design(data.train)
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(0.0, 0.01, size=(xt.shape[1], 1)), "b": np.zeros(1)}
    opt = AdamW(params, lr=lr, weight_decay=0.0)
    for _ in range(steps):
        tape = ad.Tape()
        w = tape.leaf(params["w"])
        b = tape.leaf(params["b"])
        logits = ad.bias_add(ad.matmul(ad.constant(xt), w), b)
        loss = ad.bce_with_logits(logits, y_train)
        loss = ad.add(loss, ad.scale(ad.tsum(ad.mul(w, w)), l2))
        grads = ad.grad(tape, loss, {"w": w, "b": b})
        opt.step(grads)

    def predict(patients):
        z = design(patients) @ params["w"][:, 0] + params["b"][0]
        return 1.0 / (1.0 + np.exp(-z))

    return {"train": predict(data.train), "val": predict(data.val),
            "test": predict(data.test)}


# ---------------------------------------------------------------------------
# aggregate reporting


@dataclass
class MetricsReport:
    per_fold_auc: list
    per_fold_auprc: list
    subgroups: dict | None = None
    delong: dict | None = None

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.per_fold_auc))

    @property
    def auc_sd(self) -> float:
        return float(np.std(self.per_fold_auc, ddof=1)) if len(self.per_fold_auc) > 1 else 0.0

    @property
    def auprc_mean(self) -> float:
        return float(np.mean(self.per_fold_auprc))

    @property
    def auprc_sd(self) -> float:
        return float(np.std(self.per_fold_auprc, ddof=1)) if len(self.per_fold_auprc) > 1 else 0.0

    def to_dict(self) -> dict:
        out = {
            "auc_mean": self.auc_mean, "auc_sd": self.auc_sd,
            "auprc_mean": self.auprc_mean, "auprc_sd": self.auprc_sd,
            "per_fold_auc": [float(x) for x in self.per_fold_auc],
            "per_fold_auprc": [float(x) for x in self.per_fold_auprc],
        }
        if self.subgroups is not None:
            out["subgroups"] = self.subgroups
        if self.delong is not None:
            out["delong"] = self.delong
        return out


def subgroup_metrics(scores, labels, groups) -> dict:
    """Per-group AUC/AUPRC with counts; degenerate groups flagged, not fatal."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    out = {}
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        y = labels[sel]
        entry = {"n": int(sel.sum()), "n_pos": int((y == 1).sum())}
        if entry["n_pos"] == 0 or entry["n_pos"] == entry["n"]:
            entry["auc"] = entry["auprc"] = None   # N/A marker
        else:
            entry["auc"] = auc(scores[sel], y)
            entry["auprc"] = auprc(scores[sel], y)
        out[str(g)] = entry
    return out
