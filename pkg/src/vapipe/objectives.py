"""Agreement metrics and training losses.

Column 0 of every (N, 2) prediction/label array is valence, column 1 arousal.
All second-order statistics use the population (divide-by-N) convention.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

# Below this the CCC denominator is treated as zero (both series constant and equal).
DEGENERATE_EPS = 1e-12
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SeriesStats:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float

    @classmethod
    def from_series(cls, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        mx, my = x.mean(), y.mean()
        dx, dy = x - mx, y - my
        return cls(mx, my, float((dx * dx).mean()), float((dy * dy).mean()), float((dx * dy).mean()))

    @property
    def ccc_denominator(self):
        return self.var_x + self.var_y + (self.mean_x - self.mean_y) ** 2


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"series length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ShapeError(f"CCC needs at least 2 samples, got {x.size}")
    return x, y


def ccc(x, y) -> float:
    """Concordance correlation coefficient between prediction ``x`` and label ``y``.

    Returns 0 when both series are constant and equal (zero denominator).
    """
    x, y = _check_pair(x, y)
    st = SeriesStats.from_series(x, y)
    den = st.ccc_denominator
    if den < DEGENERATE_EPS:
        return 0.0
    return 2.0 * st.cov_xy / den


def _ccc_and_grad(x, y):
    # d rho / d x_i = 2/(N D) * [(y_i - ybar) - rho * ((x_i - xbar) + (xbar - ybar))]
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = (dx * dy).mean()
    den = (dx * dx).mean() + (dy * dy).mean() + (mx - my) ** 2
    if den < DEGENERATE_EPS:
        return 0.0, np.zeros_like(x)
    rho = 2.0 * cov / den
    return rho, (2.0 / (n * den)) * (dy - rho * (dx + (mx - my)))


def _check_va(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim != 2 or pred.shape[1] != 2 or pred.shape != target.shape:
        raise ShapeError(f"expected matching (N, 2) arrays, got {pred.shape} and {target.shape}")
    if pred.shape[0] < 2:
        raise ShapeError(f"CCC loss needs N >= 2, got {pred.shape[0]}")
    return pred, target


def ccc_loss(pred, target) -> float:
    """1 - mean of the valence and arousal CCCs."""
    pred, target = _check_va(pred, target)
    rv = ccc(pred[:, 0], target[:, 0])
    ra = ccc(pred[:, 1], target[:, 1])
    return 1.0 - 0.5 * (ra + rv)


def ccc_loss_grad(pred, target):
    """Analytic gradient of :func:`ccc_loss` w.r.t. every entry of ``pred``."""
    pred, target = _check_va(pred, target)
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    grad = np.empty_like(p)
    for col in range(2):
        _, g = _ccc_and_grad(p[:, col], t[:, col])
        grad[:, col] = -0.5 * g
    return grad.astype(pred.dtype, copy=False)


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ShapeError("mse of empty input")
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def rmse(pred, target) -> float:
    return float(np.sqrt(mse(pred, target)))


def mse_grad(pred, target):
    return (2.0 / pred.size) * (pred - target)


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels.astype(np.intp)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood of the true class, probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_grad(probs, labels):
    """Fused softmax + cross-entropy gradient w.r.t. the logits: (probs - onehot) / B."""
    labels = _check_labels(labels, probs.shape[1])
    g = np.array(probs, copy=True)
    g[np.arange(g.shape[0]), labels] -= 1
    return g / g.shape[0]


def confusion_and_accuracy(preds, truths, k):
    """Confusion matrix (rows = true class, columns = predicted) and accuracy."""
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise ShapeError(f"length mismatch: {preds.size} vs {truths.size}")
    if preds.size == 0:
        raise ValueError("confusion matrix of empty input")
    preds = _check_labels(preds, k)
    truths = _check_labels(truths, k)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm, float(np.trace(cm) / cm.sum())


def per_class_recall(cm):
    """Recall per true class; NaN for classes with no samples."""
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def regression_metrics(pred, target) -> dict:
    pred = np.asarray(pred)
    target = np.asarray(target)
    return {
        "valence_ccc": ccc(pred[:, 0], target[:, 0]),
        "arousal_ccc": ccc(pred[:, 1], target[:, 1]),
        "valence_rmse": rmse(pred[:, 0], target[:, 0]),
        "arousal_rmse": rmse(pred[:, 1], target[:, 1]),
    }


def format_report(metrics: dict, confusion=None) -> str:
    """Human-readable metrics block."""
    lines = [f"{k:>14s}: {v:.6f}" for k, v in metrics.items()]
    if confusion is not None:
        lines.append("confusion matrix (rows = true, cols = predicted):")
        width = max(3, len(str(int(np.max(confusion)))))
        for row in np.asarray(confusion):
            lines.append("  " + " ".join(f"{int(c):{width}d}" for c in row))
    return "\n".join(lines)


def write_metrics(path, metrics: dict, confusion=None):
    """Machine-readable ``key = value`` metrics file; confusion rows as
    ``confusion_row_<i> = c0 c1 ...``."""
    with open(path, "w") as fh:
        for k, v in metrics.items():
            fh.write(f"{k} = {float(v)!r}\n")
        if confusion is not None:
            for i, row in enumerate(np.asarray(confusion)):
                fh.write(f"confusion_row_{i} = " + " ".join(str(int(c)) for c in row) + "\n")


def read_metrics(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key.startswith("confusion_row_"):
                out[key] = [int(v) for v in value.split()]
            else:
                out[key] = float(value)
    return out
