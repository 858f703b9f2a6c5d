"""
Classification metrics and the per-epoch metric log.
"""

import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from ..schemas.metrics import METRIC_LOG_COLUMNS, EpochRecord, MetricsReport
from ..utils.exceptions import ValidationError

logger = logging.getLogger(__name__)


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], class_count: int) -> np.ndarray:
    """Counts with true classes on rows and predicted classes on columns."""
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(labels, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ValidationError(
            f"predictions and labels must be equal-length vectors, got {preds.shape} and {truth.shape}"
        )
    for name, values in (("predictions", preds), ("labels", truth)):
        if values.size and (values.min() < 0 or values.max() >= class_count):
            raise ValidationError(f"{name} contain a class outside [0, {class_count})")
    matrix = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(matrix, (truth, preds), 1)
    return matrix


def metrics_from_confusion(matrix: np.ndarray, average: str = "macro") -> MetricsReport:
    """
    Metrics of a confusion matrix.

    Macro averages run over classes present in the labels or predictions. A
    class that is never predicted has precision 0. The geometric mean runs
    over classes present in the labels; a zero recall makes it 0.
    """
    matrix = np.asarray(matrix, dtype=np.int64)
    total = int(matrix.sum())
    if total == 0:
        raise ValidationError("Cannot compute metrics of an empty confusion matrix")

    true_positive = np.diag(matrix).astype(np.float64)
    support = matrix.sum(axis=1)
    predicted = matrix.sum(axis=0)
    present = (support > 0) | (predicted > 0)

    precision = np.divide(true_positive, predicted, out=np.zeros_like(true_positive), where=predicted > 0)
    recall = np.divide(true_positive, support, out=np.zeros_like(true_positive), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)

    never_predicted = np.flatnonzero(present & (predicted == 0))
    if never_predicted.size:
        logger.warning(
            f"Classes {never_predicted.tolist()} were never predicted; their precision is set to 0"
        )
    absent = np.flatnonzero(present & (support == 0))
    if absent.size:
        logger.warning(f"Classes {absent.tolist()} are absent from the labels and excluded from GM")

    labelled = support > 0
    recalls = recall[labelled]
    geometric_mean = float(np.prod(recalls) ** (1.0 / recalls.size))
    macro_precision = float(precision[present].mean())
    weighted_precision = float((precision * support).sum() / total)

    return MetricsReport(
        accuracy=float(true_positive.sum() / total),
        precision=weighted_precision if average == "weighted" else macro_precision,
        macro_precision=macro_precision,
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        geometric_mean=min(geometric_mean, 1.0),
        confusion_matrix=matrix.tolist(),
        average=average,
        total=total,
    )


def compute_metrics(
    predictions: Sequence[int], labels: Sequence[int], class_count: int, average: str = "macro"
) -> MetricsReport:
    """
    Accuracy, precision, F1 and geometric mean of per-class recall.

    Args:
        predictions: Predicted class per sample
        labels: True class per sample
        class_count: Number of classes
        average: ``macro`` or ``weighted`` for the reported precision

    Returns:
        MetricsReport including the confusion matrix

    Raises:
        ValidationError: Length mismatch, empty input or out-of-range class
    """
    return metrics_from_confusion(confusion_matrix(predictions, labels, class_count), average)


class MetricLog:
    """CSV writer for per-epoch metric rows."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(METRIC_LOG_COLUMNS)

    def append(self, records: Iterable[EpochRecord]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            for record in records:
                writer.writerow(
                    [
                        record.epoch,
                        record.split,
                        f"{record.accuracy:.6f}",
                        f"{record.precision:.6f}",
                        f"{record.f1:.6f}",
                        f"{record.gm:.6f}",
                        f"{record.loss:.8f}",
                    ]
                )


def read_metric_log(path: str | Path) -> List[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [EpochRecord.model_validate(row) for row in csv.DictReader(f)]
