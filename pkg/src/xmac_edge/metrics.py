"""Classification metrics, one-vs-rest ROC/AUC and the paired t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateClassError(ValueError):
    """ROC requested for a class with no positives or no negatives."""


class DegenerateVarianceError(ValueError):
    """Paired differences have zero variance; t is undefined."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K], rows = true class, columns = predicted
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_json(self) -> dict:
        return {"class_names": list(self.class_names), "matrix": self.counts.astype(int).tolist()}


def confusion_matrix(y_true, y_pred, k: int, class_names=None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"y_true and y_pred lengths differ: {y_true.size} vs {y_pred.size}")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"{name} contains labels outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationReport:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    macro: ClassMetrics
    weighted: ClassMetrics
    total: int
    # set when some precision/recall had a zero denominator and was reported as 0
    zero_division: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def row(m: ClassMetrics):
            return {"precision": m.precision, "recall": m.recall, "f1-score": m.f1, "support": m.support}

        return {
            "classes": {name: row(m) for name, m in self.per_class.items()},
            "accuracy": self.accuracy,
            "macro avg": row(self.macro),
            "weighted avg": row(self.weighted),
            "total": self.total,
            "zero_division": list(self.zero_division),
        }

    def format(self, digits: int = 2) -> str:
        width = max([len(n) for n in self.per_class] + [12])
        head = f"{'':>{width}}  precision    recall  f1-score   support"
        lines = [head, ""]
        fmt = f"{{:>{width}}}  {{:>9.{digits}f}} {{:>9.{digits}f}} {{:>9.{digits}f}} {{:>9d}}"
        for name, m in self.per_class.items():
            lines.append(fmt.format(name, m.precision, m.recall, m.f1, m.support))
        lines.append("")
        lines.append(f"{'accuracy':>{width}}  {'':>9} {'':>9} {self.accuracy:>9.{digits}f} {self.total:>9d}")
        lines.append(fmt.format("macro avg", self.macro.precision, self.macro.recall, self.macro.f1, self.total))
        lines.append(fmt.format("weighted avg", self.weighted.precision, self.weighted.recall, self.weighted.f1, self.total))
        return "\n".join(lines)


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    total = int(c.sum())
    per_class, flags = {}, []
    for i, name in enumerate(cm.class_names):
        p, zp = _safe_div(tp[i], col[i])
        r, zr = _safe_div(tp[i], row[i])
        f, _ = _safe_div(2 * p * r, p + r)
        if zp:
            flags.append(f"{name}:precision")
        if zr:
            flags.append(f"{name}:recall")
        per_class[name] = ClassMetrics(p, r, f, int(row[i]))
    ms = list(per_class.values())
    k = len(ms)
    macro = ClassMetrics(
        sum(m.precision for m in ms) / k, sum(m.recall for m in ms) / k, sum(m.f1 for m in ms) / k, total
    )
    if total:
        weighted = ClassMetrics(
            sum(m.precision * m.support for m in ms) / total,
            sum(m.recall * m.support for m in ms) / total,
            sum(m.f1 * m.support for m in ms) / total,
            total,
        )
        acc = float(tp.sum() / total)
    else:
        weighted = ClassMetrics(0.0, 0.0, 0.0, 0)
        acc = 0.0
        flags.append("accuracy")
    return ClassificationReport(per_class, acc, macro, weighted, total, flags)


# ---------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produced point i+1; point 0 is (0, 0)


@dataclass
class RocResult:
    curves: dict[str, RocCurve]
    aucs: dict[str, float]

    def to_json(self) -> dict:
        return {
            name: {"fpr": c.fpr.tolist(), "tpr": c.tpr.tolist(), "auc": self.aucs[name]}
            for name, c in self.curves.items()
        }


def roc_curve(y_true, scores, c: int) -> RocCurve:
    """One-vs-rest ROC for class ``c``.

    ``scores`` is [N, K] (column ``c`` is used) or a 1-D score for class ``c``.
    One step per distinct score, so ties move diagonally.
    """
    y_true = np.asarray(y_true).reshape(-1)
    s = np.asarray(scores, dtype=np.float64)
    s = s[:, c] if s.ndim == 2 else s.reshape(-1)
    pos = y_true == c
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"class {c} has {n_pos} positives and {n_neg} negatives; ROC undefined")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, pos_sorted = s[order], pos[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted)), s_sorted.size - 1]
    tps = np.cumsum(pos_sorted)[last_of_group]
    fps = (last_of_group + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return RocCurve(fpr, tpr, s_sorted[last_of_group])


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def roc_one_vs_rest(y_true, scores, class_names) -> RocResult:
    curves, aucs = {}, {}
    for i, name in enumerate(class_names):
        cur = roc_curve(y_true, scores, i)
        curves[name] = cur
        aucs[name] = auc(cur)
    return RocResult(curves, aucs)


# ---------------------------------------------------------------- t-test


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 500) -> float:
    # modified Lentz continued fraction for the incomplete beta function
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    """Student-t cumulative distribution function."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if t == 0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


@dataclass
class TTestResult:
    t: float
    df: int
    p_value: float
    mean_difference: float

    def to_json(self) -> dict:
        return {"t": self.t, "df": self.df, "p_value": self.p_value, "mean_difference": self.mean_difference}


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on ``a - b``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or not np.isfinite(sd):
        raise DegenerateVarianceError("paired differences have zero variance; t statistic is undefined")
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = 2.0 * t_cdf(-abs(t), df)
    return TTestResult(t, df, min(1.0, max(0.0, p)), mean)
