"""Evaluation metrics, ROC/PR curves, and the nonparametric statistics
battery (one-way ANOVA, Kruskal-Wallis with tie correction, Dunn's post hoc
with Bonferroni, Cohen's kappa).

p-values are computed from scratch via the regularized incomplete gamma and
beta functions (series + Lentz continued fractions, relative error well below
1e-10 over the working range); the normal CDF uses math.erfc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_MAX_ITER = 600
_EPS = 1e-16
_TINY = 1e-300


# ---------------------------------------------------------------------------
# Special functions


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValidationError(f"gammainc_lower: a must be > 0, got {a}")
    if x < 0:
        raise ValidationError(f"gammainc_lower: x must be >= 0, got {x}")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        # series expansion around 0
        ap = a
        summ = 1.0 / a
        delt = summ
        for _ in range(_MAX_ITER):
            ap += 1.0
            delt *= x / ap
            summ += delt
            if abs(delt) < abs(summ) * _EPS:
                break
        return min(1.0, summ * math.exp(-x + a * math.log(x) - math.lgamma(a)))
    # continued fraction for the upper tail Q(a, x), modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        de = d * c
        h *= de
        if abs(de - 1.0) < _EPS:
            break
    q = math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    return max(0.0, 1.0 - q)


def _betacf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        de = d * c
        h *= de
        if abs(de - 1.0) < _EPS:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValidationError(f"betainc_reg: a and b must be > 0, got a={a} b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValidationError(f"betainc_reg: x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    bt = math.exp(
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return min(1.0, bt * _betacf(a, b, x) / a)
    return max(0.0, 1.0 - bt * _betacf(b, a, 1.0 - x) / b)


def cdf_normal(x: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))


def cdf_chi2(x: float, df: float) -> float:
    """Chi-square CDF with df degrees of freedom."""
    if df <= 0:
        raise ValidationError(f"cdf_chi2: df must be > 0, got {df}")
    if x <= 0:
        return 0.0
    return gammainc_lower(df / 2.0, x / 2.0)


def cdf_f(x: float, df1: float, df2: float) -> float:
    """F-distribution CDF with (df1, df2) degrees of freedom."""
    if df1 <= 0 or df2 <= 0:
        raise ValidationError(f"cdf_f: degrees of freedom must be > 0, got {df1}, {df2}")
    if x <= 0:
        return 0.0
    return betainc_reg(df1 / 2.0, df2 / 2.0, df1 * x / (df1 * x + df2))


def _clamp_p(p: float) -> float:
    return min(1.0, max(0.0, p))


# ---------------------------------------------------------------------------
# Confusion matrix and derived metrics


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise ValidationError(f"need matching non-empty 1-d label arrays, got {t.shape} vs {p.shape}")
    if not (np.issubdtype(t.dtype, np.integer) and np.issubdtype(p.dtype, np.integer)):
        raise ValidationError("labels must be integer class indices")
    if n_classes < 2:
        raise ValidationError(f"n_classes must be >= 2, got {n_classes}")
    if t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes:
        raise ValidationError(f"labels must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray
    per_class: tuple  # dicts: class, support, precision, recall, f1
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    warnings: tuple = ()

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class": list(self.per_class),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "warnings": list(self.warnings),
        }


def classification_metrics(cm: np.ndarray, class_names=None) -> MetricsReport:
    """Per-class precision/recall/F1 (0/0 counted as 0 with a warning),
    unweighted macro averages, and overall accuracy."""
    m = np.asarray(cm)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ValidationError(f"confusion matrix must be square with >= 2 classes, got {m.shape}")
    if np.any(m < 0):
        raise ValidationError("confusion matrix counts must be non-negative")
    total = int(m.sum())
    if total == 0:
        raise ValidationError("confusion matrix is empty")
    c = m.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
    if len(names) != c:
        raise ValidationError(f"expected {c} class names, got {len(names)}")

    warnings = []
    rows = []
    for i in range(c):
        tp = float(m[i, i])
        fp = float(m[:, i].sum() - m[i, i])
        fn = float(m[i, :].sum() - m[i, i])
        if tp + fp == 0:
            precision = 0.0
            warnings.append(f"precision undefined for class {names[i]} (no predictions); using 0")
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall = 0.0
            warnings.append(f"recall undefined for class {names[i]} (no true samples); using 0")
        else:
            recall = tp / (tp + fn)
        if precision + recall == 0:
            f1 = 0.0
            if tp + fp > 0 and tp + fn > 0:
                warnings.append(f"f1 undefined for class {names[i]}; using 0")
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        rows.append(
            {
                "class": names[i],
                "support": int(m[i, :].sum()),
                "precision": precision,
                "recall": recall,
                "f1": f1,
            }
        )
    return MetricsReport(
        confusion=m.astype(np.int64),
        per_class=tuple(rows),
        accuracy=float(np.trace(m)) / total,
        macro_precision=float(np.mean([r["precision"] for r in rows])),
        macro_recall=float(np.mean([r["recall"] for r in rows])),
        macro_f1=float(np.mean([r["f1"] for r in rows])),
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# ROC / PR curves


def _binary_counts(scores: np.ndarray, labels: np.ndarray) -> tuple:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise ValidationError("scores and labels must be matching non-empty 1-d arrays")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("binary labels must be 0/1")
    pos = int(y.sum())
    neg = int(y.size - pos)
    if pos == 0 or neg == 0:
        raise ValidationError("need at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(1 - y_sorted)
    # keep one point per distinct score (the last index of each run)
    distinct = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    return tps[distinct], fps[distinct], s_sorted[distinct], pos, neg


def binary_roc(scores, labels) -> dict:
    """One-vs-rest ROC points (starting at (0,0), ending at (1,1)) and the
    trapezoidal AUC."""
    tps, fps, thr, pos, neg = _binary_counts(scores, labels)
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    auc = float(np.trapezoid(tpr, fpr))
    return {"fpr": fpr, "tpr": tpr, "thresholds": thr, "auc": auc}


def binary_pr(scores, labels) -> dict:
    """One-vs-rest precision/recall points and step-interpolated average
    precision AP = sum (R_k - R_{k-1}) * P_k."""
    tps, fps, thr, pos, _ = _binary_counts(scores, labels)
    recall = tps / pos
    precision = tps / (tps + fps)
    dr = np.diff(np.r_[0.0, recall])
    ap = float(np.sum(dr * precision))
    return {"recall": recall, "precision": precision, "thresholds": thr, "ap": ap}


@dataclass(frozen=True)
class CurveSet:
    per_class: dict
    macro_auc: float
    macro_ap: float
    macro_roc: dict
    skipped: tuple = ()

    def to_dict(self) -> dict:
        out = {"per_class": {}, "macro_auc": self.macro_auc, "macro_ap": self.macro_ap}
        for name, c in self.per_class.items():
            out["per_class"][name] = {
                "fpr": list(map(float, c["roc"]["fpr"])),
                "tpr": list(map(float, c["roc"]["tpr"])),
                "auc": c["roc"]["auc"],
                "recall": list(map(float, c["pr"]["recall"])),
                "precision": list(map(float, c["pr"]["precision"])),
                "ap": c["pr"]["ap"],
            }
        out["macro_roc"] = {
            "fpr": list(map(float, self.macro_roc["fpr"])),
            "tpr": list(map(float, self.macro_roc["tpr"])),
        }
        out["skipped"] = list(self.skipped)
        return out


def roc_pr_curves(probs, labels, class_names=None) -> CurveSet:
    """One-vs-rest ROC and PR curves per class plus macro averages.

    probs: (n, C) rows summing to 1 (validated to 1e-6); labels: ints 0..C-1.
    Classes without both positives and negatives are skipped with a note."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or p.shape[0] != y.shape[0] or y.ndim != 1:
        raise ValidationError(f"bad shapes: probs {p.shape}, labels {y.shape}")
    if np.any(p < -1e-9) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("probability rows must be non-negative and sum to 1")
    n, c = p.shape
    names = list(class_names) if class_names is not None else [str(i) for i in range(c)]

    per_class = {}
    skipped = []
    for k in range(c):
        binary = (y == k).astype(np.int64)
        if binary.sum() == 0 or binary.sum() == n:
            skipped.append(f"class {names[k]}: needs both positives and negatives")
            continue
        per_class[names[k]] = {"roc": binary_roc(p[:, k], binary), "pr": binary_pr(p[:, k], binary)}
    if not per_class:
        raise ValidationError("no class had both positive and negative samples")

    grid = np.unique(np.concatenate([c["roc"]["fpr"] for c in per_class.values()]))
    mean_tpr = np.mean(
        [np.interp(grid, c["roc"]["fpr"], c["roc"]["tpr"]) for c in per_class.values()], axis=0
    )
    return CurveSet(
        per_class=per_class,
        macro_auc=float(np.mean([c["roc"]["auc"] for c in per_class.values()])),
        macro_ap=float(np.mean([c["pr"]["ap"] for c in per_class.values()])),
        macro_roc={"fpr": grid, "tpr": mean_tpr},
        skipped=tuple(skipped),
    )


# ---------------------------------------------------------------------------
# Rank helpers


def midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..N with ties assigned the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_sum(values: np.ndarray) -> float:
    """sum over tie groups of (t^3 - t)."""
    _, counts = np.unique(np.asarray(values, dtype=np.float64), return_counts=True)
    t = counts.astype(np.float64)
    return float(np.sum(t ** 3 - t))


# ---------------------------------------------------------------------------
# Statistical tests


@dataclass(frozen=True)
class StatResult:
    test: str
    statistic: float
    df: tuple
    p_value: float
    correction: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "test": self.test,
            "statistic": self.statistic,
            "df": list(self.df),
            "p_value": self.p_value,
            "correction": self.correction,
            "details": self.details,
        }


def _check_groups(groups, min_groups=2) -> list:
    gs = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(gs) < min_groups:
        raise ValidationError(f"need at least {min_groups} groups, got {len(gs)}")
    for i, g in enumerate(gs):
        if g.size == 0:
            raise ValidationError(f"group {i} is empty")
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"group {i} contains non-finite values")
    return gs


def anova_oneway(groups) -> StatResult:
    """One-way fixed-effects ANOVA; F = MS_between / MS_within."""
    gs = _check_groups(groups)
    k = len(gs)
    n_total = sum(g.size for g in gs)
    if n_total - k < 1:
        raise ValidationError("not enough residual degrees of freedom (need N > k)")
    grand = np.concatenate(gs).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in gs)
    ss_within = sum(float(((g - g.mean()) ** 2).sum()) for g in gs)
    df1, df2 = k - 1, n_total - k
    ms_between = ss_between / df1
    ms_within = ss_within / df2
    if ms_within == 0.0:
        f_stat = 0.0 if ms_between == 0.0 else math.inf
        p = 1.0 if ms_between == 0.0 else 0.0
    else:
        f_stat = ms_between / ms_within
        p = _clamp_p(1.0 - cdf_f(f_stat, df1, df2))
    return StatResult("anova_oneway", float(f_stat), (df1, df2), p)


def kruskal_wallis(groups) -> StatResult:
    """Kruskal-Wallis H with mid-ranks and tie correction."""
    gs = _check_groups(groups)
    k = len(gs)
    pooled = np.concatenate(gs)
    n = pooled.size
    if n < 3:
        raise ValidationError("need at least 3 observations in total")
    ranks = midranks(pooled)
    h = 0.0
    start = 0
    for g in gs:
        r = ranks[start : start + g.size]
        h += (r.sum() ** 2) / g.size
        start += g.size
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0)
    correction = 1.0 - _tie_sum(pooled) / (n ** 3 - n)
    if correction <= 0.0:
        # every observation identical
        return StatResult("kruskal_wallis", 0.0, (k - 1,), 1.0, details={"tie_correction": 0.0})
    h_corrected = h / correction
    p = _clamp_p(1.0 - cdf_chi2(h_corrected, k - 1))
    return StatResult(
        "kruskal_wallis", float(h_corrected), (k - 1,), p, details={"tie_correction": correction}
    )


def dunn_posthoc(groups, group_names=None) -> list:
    """Dunn's pairwise z tests on mean ranks, two-sided, Bonferroni-corrected
    (multiplied by the number of pairs, capped at 1)."""
    gs = _check_groups(groups)
    k = len(gs)
    names = list(group_names) if group_names is not None else [str(i) for i in range(k)]
    if len(names) != k:
        raise ValidationError(f"expected {k} group names, got {len(names)}")
    pooled = np.concatenate(gs)
    n = pooled.size
    ranks = midranks(pooled)
    mean_ranks = []
    start = 0
    for g in gs:
        mean_ranks.append(ranks[start : start + g.size].mean())
        start += g.size
    tie_term = _tie_sum(pooled) / (12.0 * (n - 1.0)) if n > 1 else 0.0
    var_base = n * (n + 1.0) / 12.0 - tie_term
    n_pairs = k * (k - 1) // 2
    out = []
    for i in range(k):
        for j in range(i + 1, k):
            se = math.sqrt(max(var_base, 0.0) * (1.0 / gs[i].size + 1.0 / gs[j].size))
            z = 0.0 if se == 0.0 else (mean_ranks[i] - mean_ranks[j]) / se
            p_raw = _clamp_p(2.0 * (1.0 - cdf_normal(abs(z))))
            out.append(
                StatResult(
                    "dunn",
                    float(z),
                    (),
                    _clamp_p(p_raw * n_pairs),
                    correction="bonferroni",
                    details={"pair": [names[i], names[j]], "p_raw": p_raw},
                )
            )
    return out


def cohens_kappa(rater_a, rater_b) -> StatResult:
    """Cohen's kappa for two raters over the same items.

    kappa = (p_o - p_e) / (1 - p_e); if p_e = 1 the convention is kappa = 1
    when the raters agree everywhere, else 0. p is the large-sample normal
    test of kappa = 0."""
    a = list(rater_a)
    b = list(rater_b)
    if len(a) != len(b) or len(a) == 0:
        raise ValidationError("raters must cover the same non-empty item set")
    n = len(a)
    cats = sorted(set(a) | set(b), key=str)
    pa = {c: 0.0 for c in cats}
    pb = {c: 0.0 for c in cats}
    agree = 0
    for x, y in zip(a, b):
        pa[x] += 1.0 / n
        pb[y] += 1.0 / n
        agree += x == y
    p_o = agree / n
    p_e = sum(pa[c] * pb[c] for c in cats)
    if p_e >= 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
        p = 1.0 if kappa == 0.0 else 0.0
        return StatResult("cohens_kappa", kappa, (), p, details={"p_o": p_o, "p_e": p_e})
    kappa = (p_o - p_e) / (1.0 - p_e)
    inner = p_e + p_e ** 2 - sum(pa[c] * pb[c] * (pa[c] + pb[c]) for c in cats)
    se0 = math.sqrt(max(inner, 0.0)) / ((1.0 - p_e) * math.sqrt(n))
    if se0 == 0.0:
        p = 1.0 if kappa == 0.0 else 0.0
    else:
        p = _clamp_p(2.0 * (1.0 - cdf_normal(abs(kappa) / se0)))
    return StatResult("cohens_kappa", float(kappa), (), p, details={"p_o": p_o, "p_e": p_e})
