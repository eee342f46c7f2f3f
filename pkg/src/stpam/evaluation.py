"""Metrics, shrinkage-LDA reference, paired t-test and the variant ablation sweep."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EvalReport:
    n: int
    accuracy: float
    balanced_accuracy: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]    # rows: true class, columns: predicted

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision"], d["recall"] = list(self.precision), list(self.recall)
        d["confusion"] = [list(r) for r in self.confusion]
        return d


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise EvaluationError("predictions and labels differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise EvaluationError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def report_from_confusion(cm) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise EvaluationError("cannot evaluate an empty split")
    diag = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = np.divide(diag, support, out=np.zeros_like(diag), where=support > 0)
    precision = np.divide(diag, predicted, out=np.zeros_like(diag), where=predicted > 0)
    present = support > 0
    return EvalReport(n, float(diag.sum() / n), float(recall[present].mean()),
                      tuple(map(float, precision)), tuple(map(float, recall)),
                      tuple(tuple(int(v) for v in row) for row in cm))


def evaluate_predictions(y_true, y_pred, n_classes: int = 2) -> EvalReport:
    return report_from_confusion(confusion_matrix(y_true, y_pred, n_classes))


def evaluate(predict: Callable[[np.ndarray], np.ndarray], X: np.ndarray, y: np.ndarray,
             n_classes: int = 2) -> EvalReport:
    """Score any ``predict(X) -> labels`` callable (a model's or the baseline's)."""
    if len(X) == 0:
        raise EvaluationError("cannot evaluate an empty split")
    return evaluate_predictions(y, predict(X), n_classes)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    values: tuple[float, ...]

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}"


def summarize(values: Sequence[float]) -> Summary:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EvaluationError("nothing to summarize")
    return Summary(float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, tuple(map(float, v)))


# ---------------------------------------------------------------------------
# shrinkage LDA


def ledoit_wolf_shrinkage(Xc: np.ndarray) -> float:
    """Analytic shrinkage intensity toward (tr S / p) I for centered rows ``Xc`` (n x p).

    Everything is computed from the n x n Gram matrix, so p may be large.
    """
    n, p = Xc.shape
    K = Xc @ Xc.T
    trS = np.trace(K) / n
    S2 = np.sum(K * K) / n ** 2                    # ||S||_F^2
    d2 = S2 - trS ** 2 / p                         # ||S - nu I||_F^2
    if d2 <= 0:
        return 1.0
    sq = np.diag(K)
    b2 = (np.sum(sq ** 2) - n * S2) / n ** 2       # (1/n^2) sum_i ||x_i x_i^T - S||_F^2
    return float(np.clip(min(b2, d2) / d2, 0.0, 1.0))


@dataclass
class ShrinkageLDA:
    """Linear discriminant with a Ledoit-Wolf shrunk pooled covariance.

    ``shrinkage`` is "auto" for the analytic estimate or a fixed value in
    [0, 1]. Ties between discriminants resolve to the lowest class index.
    """
    shrinkage: object = "auto"
    classes_: np.ndarray = field(default=None, init=False)
    coef_: np.ndarray = field(default=None, init=False)          # (K, p)
    intercept_: np.ndarray = field(default=None, init=False)     # (K,)
    lambda_: float = field(default=None, init=False)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "ShrinkageLDA":
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        y = np.asarray(y)
        classes = np.unique(y)
        if len(classes) < 2:
            raise EvaluationError("training set needs at least two classes")
        n, p = X.shape
        means = np.stack([X[y == c].mean(axis=0) for c in classes])
        Xc = X - means[np.searchsorted(classes, y)]
        if self.shrinkage == "auto":
            lam = ledoit_wolf_shrinkage(Xc)
        else:
            lam = float(self.shrinkage)
            if not 0 <= lam <= 1:
                raise EvaluationError("shrinkage must lie in [0, 1]")
        nu = np.sum(Xc * Xc) / (n * p)
        alpha, beta = lam * nu, (1 - lam) / n       # Sigma = alpha I + beta Xc^T Xc
        V = means.T                                  # (p, K)
        if beta == 0:
            W = V / alpha
        else:
            K = Xc @ Xc.T
            if alpha == 0:
                raise EvaluationError("covariance is singular without shrinkage")
            inner = np.linalg.solve(K + (alpha / beta) * np.eye(n), Xc @ V)
            W = (V - Xc.T @ inner) / alpha
        priors = np.array([np.mean(y == c) for c in classes])
        self.classes_ = classes
        self.coef_ = W.T
        self.intercept_ = -0.5 * np.einsum("kp,kp->k", self.coef_, means) + np.log(priors)
        self.lambda_ = lam
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        if self.coef_ is None:
            raise EvaluationError("baseline is not fitted")
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        return X @ self.coef_.T + self.intercept_

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def rlda_baseline(X: np.ndarray, y: np.ndarray, shrinkage="auto") -> ShrinkageLDA:
    return ShrinkageLDA(shrinkage).fit(X, y)


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
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
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, dof: float) -> float:
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    mean_diff: float
    degenerate: Optional[str] = None    # "identical" or "constant-difference"

    @property
    def symbol(self) -> str:
        return significance_symbol(self.p)


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise EvaluationError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, mean, "identical")
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, mean, "constant-difference")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_two_tailed_p(t, n - 1), n - 1, mean)


def significance_symbol(p: float) -> str:
    """Tiers 0.05 / 0.005 / 0.001 marked *, dagger, double dagger."""
    if p < 0.001:
        return "‡"
    if p < 0.005:
        return "†"
    if p < 0.05:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# ablation


VARIANT_ORDER = ("stm", "stam", "stpam")


@dataclass
class AblationTable:
    seeds: list[int]
    accuracy: dict[str, list[float]]               # variant -> per-seed test accuracy
    slack: float = 1.0                             # points
    seconds: float = 0.0

    def median(self, variant: str) -> float:
        return float(np.median(self.accuracy[variant]))

    def median_monotone(self) -> bool:
        s = self.slack / 100.0
        m = [self.median(v) for v in VARIANT_ORDER]
        return m[0] <= m[1] + s and m[1] <= m[2] + s

    def ordered_seeds(self) -> int:
        """Seeds where STM <= STAM <= STPAM holds exactly."""
        acc = [self.accuracy[v] for v in VARIANT_ORDER]
        return int(sum(acc[0][i] <= acc[1][i] <= acc[2][i] for i in range(len(self.seeds))))

    def render(self) -> str:
        head = "variant\t" + "\t".join(f"seed{s}" for s in self.seeds) + "\tmedian"
        rows = [head]
        for v in VARIANT_ORDER:
            vals = "\t".join(f"{100 * a:.2f}" for a in self.accuracy[v])
            rows.append(f"{v}\t{vals}\t{100 * self.median(v):.2f}")
        rows.append(f"# seeds shared by all variants: {self.seeds}")
        rows.append(f"# median monotone within {self.slack:g} point(s): {self.median_monotone()}")
        rows.append(f"# seeds with STM <= STAM <= STPAM: {self.ordered_seeds()}/{len(self.seeds)}")
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "accuracy": self.accuracy, "slack": self.slack,
                "medians": {v: self.median(v) for v in VARIANT_ORDER},
                "median_monotone": self.median_monotone(), "ordered_seeds": self.ordered_seeds(),
                "seconds": self.seconds}


def ablation_sweep(run: Callable[[str, int], float], seeds: Sequence[int],
                   slack: float = 1.0, log: Optional[Callable[[str], None]] = None) -> AblationTable:
    """Call ``run(variant, seed) -> test accuracy`` for every variant and seed.

    ``run`` is expected to derive data order and initialization from the seed
    alone, so the three variants see identical batches.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise EvaluationError("an ablation needs at least three seeds")
    start = time.perf_counter()
    acc = {v: [] for v in VARIANT_ORDER}
    for seed in seeds:
        for v in VARIANT_ORDER:
            a = float(run(v, seed))
            acc[v].append(a)
            if log:
                log(f"{v}\tseed {seed}\t{100 * a:.2f}")
    return AblationTable(seeds, acc, slack, time.perf_counter() - start)
