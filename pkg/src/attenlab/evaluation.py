"""Confusion matrices, binary metrics, ROC/AUC, exact intervals, k-fold CV."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

UNDEFINED = "undefined"
MALIGNANT = 3
BINARY_THRESHOLD = 0.5


# -- confusion / binary metrics ------------------------------------------------

def confusion(preds, actual, k: int) -> np.ndarray:
    """``k x k`` counts; cell ``(i, j)`` = actual class i predicted as j."""
    preds = np.asarray(preds, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if preds.shape != actual.shape:
        raise DimensionError(f"{preds.shape[0]} predictions for {actual.shape[0]} labels")
    for arr in (preds, actual):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"labels must lie in 0..{k - 1}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (actual, preds), 1)
    return cm


def accuracy_of(cm: np.ndarray) -> float:
    return float(np.trace(cm)) / float(cm.sum())


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ContractError("binary counts must be non-negative")

    @classmethod
    def from_predictions(cls, pred_positive, actual_positive) -> BinaryCounts:
        p = np.asarray(pred_positive, dtype=bool)
        a = np.asarray(actual_positive, dtype=bool)
        return cls(int(np.sum(p & a)), int(np.sum(~p & ~a)), int(np.sum(p & ~a)), int(np.sum(~p & a)))

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ratio(num: int, den: int):
    return num / den if den > 0 else UNDEFINED


def binary_metrics(c: BinaryCounts) -> dict:
    """Accuracy, sensitivity, specificity, PPV, NPV.

    A metric whose denominator is zero is the string ``"undefined"``.
    """
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "ppv": _ratio(c.tp, c.tp + c.fp),
        "npv": _ratio(c.tn, c.tn + c.fn),
    }


def aggregate_binary(probs) -> np.ndarray:
    """Benign/malignant probabilities from NE, EP, EH, EA probabilities.

    Accepts one 4-vector or an ``(n, 4)`` array; returns ``(..., 2)`` holding
    ``(p_benign, p_malignant)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] != 4:
        raise DimensionError(f"expected 4 class probabilities, got {p.shape[-1]}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("class probabilities must sum to 1")
    malignant = p[..., MALIGNANT]
    benign = p[..., :MALIGNANT].sum(axis=-1)
    return np.stack([benign, malignant], axis=-1)


# -- ROC / AUC ---------------------------------------------------------------

def roc(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points ``(thresholds, fpr, tpr)`` from (0, 0) to (1, 1).

    A sample is called positive when its score is >= the threshold; the
    thresholds are ``+inf`` followed by the distinct scores in descending
    order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    thresholds = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return thresholds, fpr, tpr


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (equals the Mann-Whitney estimate)."""
    _, fpr, tpr = roc(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


# -- Clopper-Pearson -----------------------------------------------------------

def clopper_pearson(k: int, n: int, conf: float = 0.95) -> tuple[float, float]:
    """Exact two-sided binomial interval for ``k`` successes in ``n`` trials."""
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))):
        raise ContractError("k and n must be integers")
    if n < 1 or k < 0 or k > n:
        raise ContractError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0 < conf < 1:
        raise ContractError("confidence must lie in (0, 1)")
    alpha = 1 - conf
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


# -- k-fold ------------------------------------------------------------------

def kfold(n: int, k: int = 10, seed: int = 7, labels=None) -> list[np.ndarray]:
    """Seeded random partition of ``range(n)`` into ``k`` folds.

    Fold sizes differ by at most one. Passing ``labels`` stratifies: each
    class is shuffled and dealt round-robin, continuing where the previous
    class stopped.
    """
    if k < 2 or n < k:
        raise ContractError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    if labels is None:
        perm = rng.permutation(n)
        return [np.sort(part) for part in np.array_split(perm, k)]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError("labels must have length n")
    buckets: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        for idx in members:
            buckets[pos % k].append(int(idx))
            pos += 1
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


# -- cross-validation ----------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    fourclass_accuracy: float
    fourclass_ci: tuple[float, float]
    binary: dict
    binary_ci: tuple[float, float]
    auc: float | str
    confusion: np.ndarray
    warnings: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    folds: list[FoldResult]

    def values(self, task: str, metric: str) -> list:
        out = []
        for f in self.folds:
            if task == "fourclass":
                out.append(f.fourclass_accuracy if metric == "accuracy" else None)
            elif metric == "auc":
                out.append(f.auc)
            else:
                out.append(f.binary[metric])
        return out

    def summary(self, task: str, metric: str) -> tuple[float | str, float | str]:
        """Mean and sample standard deviation over folds with a defined value."""
        vals = [v for v in self.values(task, metric) if isinstance(v, (float, int))]
        if not vals:
            return UNDEFINED, UNDEFINED
        mean = float(np.mean(vals))
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else UNDEFINED
        return mean, sd

    @property
    def warnings(self) -> list[str]:
        return [w for f in self.folds for w in f.warnings]

    def write_csv(self, path) -> None:
        write_metrics_csv(self, path)


METRIC_COLUMNS = ["fold", "task", "accuracy", "sensitivity", "specificity", "ppv", "npv", "auc", "ci_lo", "ci_hi"]
BINARY_METRICS = ("accuracy", "sensitivity", "specificity", "ppv", "npv", "auc")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_metrics_csv(report: MetricsReport, path) -> None:
    """Per-fold rows for both tasks, then ``mean`` and ``sd`` footer rows.

    The CI columns hold the exact 95% interval of that row's accuracy.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for f in report.folds:
            w.writerow([f.fold, "fourclass", _fmt(f.fourclass_accuracy), "", "", "", "", "",
                        _fmt(f.fourclass_ci[0]), _fmt(f.fourclass_ci[1])])
            b = f.binary
            w.writerow([f.fold, "binary", _fmt(b["accuracy"]), _fmt(b["sensitivity"]), _fmt(b["specificity"]),
                        _fmt(b["ppv"]), _fmt(b["npv"]), _fmt(f.auc), _fmt(f.binary_ci[0]), _fmt(f.binary_ci[1])])
        for stat_idx, label in ((0, "mean"), (1, "sd")):
            m = report.summary("fourclass", "accuracy")[stat_idx]
            w.writerow([label, "fourclass", _fmt(m), "", "", "", "", "", "", ""])
            row = [label, "binary"] + [_fmt(report.summary("binary", k)[stat_idx]) for k in BINARY_METRICS]
            w.writerow(row + ["", ""])


def write_fold_accuracy_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "fourclass_accuracy", "binary_accuracy"])
        for f in report.folds:
            w.writerow([f.fold, _fmt(f.fourclass_accuracy), _fmt(f.binary["accuracy"])])


def write_roc_csv(thresholds, fpr, tpr, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(thresholds, fpr, tpr):
            w.writerow([_fmt(t), _fmt(x), _fmt(y)])


def evaluate_predictions(probs: np.ndarray, labels, fold: int = 0) -> FoldResult:
    """Four-class and benign/malignant metrics for one set of predictions."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    cm = confusion(probs.argmax(axis=1), labels, k)
    correct = int(np.trace(cm))
    notes = []
    bin_probs = aggregate_binary(probs)
    scores = bin_probs[:, 1]
    actual_pos = labels == MALIGNANT
    counts = BinaryCounts.from_predictions(scores >= BINARY_THRESHOLD, actual_pos)
    if actual_pos.all() or not actual_pos.any():
        area = UNDEFINED
        notes.append(f"fold {fold}: AUC undefined, test split has a single binary class")
    else:
        area = auc(scores, actual_pos)
    return FoldResult(
        fold=fold,
        fourclass_accuracy=correct / len(labels),
        fourclass_ci=clopper_pearson(correct, len(labels)),
        binary=binary_metrics(counts),
        binary_ci=clopper_pearson(counts.tp + counts.tn, counts.total),
        auc=area,
        confusion=cm,
        warnings=notes,
    )


Fitter = Callable[[list, np.ndarray, int], Callable[[list], np.ndarray]]


def _run_fold(args) -> FoldResult:
    fold, fit, train_x, train_y, test_x, test_y, fold_seed, k = args
    notes = []
    present = set(np.unique(train_y).tolist())
    for cls in range(k):
        if cls not in present:
            notes.append(f"fold {fold}: class {cls} absent from the training split")
            log.warning(notes[-1])
    predict_fn = fit(train_x, train_y, fold_seed)
    result = evaluate_predictions(predict_fn(test_x), test_y, fold)
    result.warnings = notes + result.warnings
    return result


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def cross_validate(
    images: Sequence[np.ndarray],
    labels,
    fit: Fitter,
    folds: int = 10,
    seed: int = 7,
    stratified: bool = False,
    jobs: int = 1,
    num_classes: int = 4,
) -> MetricsReport:
    """k-fold cross-validation with a pluggable ``fit``.

    ``fit(train_images, train_labels, fold_seed)`` returns a function mapping
    test images to an ``(n, num_classes)`` probability array. Folds run in
    worker processes when ``jobs > 1``; results are always ordered by fold.
    """
    labels = np.asarray(labels, dtype=np.int64)
    missing = set(range(num_classes)) - set(np.unique(labels).tolist())
    if missing:
        raise ContractError(f"classes {sorted(missing)} absent from the dataset")
    parts = kfold(len(labels), folds, seed, labels if stratified else None)
    tasks = []
    for i, test_idx in enumerate(parts):
        train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
        tasks.append((
            i + 1, fit,
            [images[j] for j in train_idx], labels[train_idx],
            [images[j] for j in test_idx], labels[test_idx],
            fold_seed(seed, i + 1), num_classes,
        ))
    cap = os.environ.get("ATTENLAB_THREADS")
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    return MetricsReport(results)


def hienet_fitter(model_config, train_config):
    """A ``fit`` callable that trains a fresh model per fold."""
    return _HienetFitter(model_config, train_config)


@dataclass
class _HienetFitter:
    model_config: object
    train_config: object

    def __call__(self, images, labels, seed):
        from dataclasses import replace

        from .model import build, predict
        from .training import make_batch, train

        model = build(replace(self.model_config, seed=seed))
        train(model, images, labels, replace(self.train_config, seed=seed))
        size = self.model_config.input_size

        def predict_fn(test_images):
            return predict(model, make_batch(test_images, size, None))

        return predict_fn


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    vals = [float(v) for v in values]
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan
