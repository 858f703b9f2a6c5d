"""
Pydantic schemas for evaluation metrics and training logs.
"""

from typing import List, Literal

from pydantic import BaseModel, Field

METRIC_LOG_COLUMNS = ("epoch", "split", "accuracy", "precision", "f1", "gm", "loss")


class MetricsReport(BaseModel):
    """Classification metrics for one split."""

    accuracy: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1, description="Precision under `average`")
    macro_precision: float = Field(..., ge=0, le=1)
    macro_recall: float = Field(..., ge=0, le=1)
    macro_f1: float = Field(..., ge=0, le=1)
    geometric_mean: float = Field(..., ge=0, le=1)
    confusion_matrix: List[List[int]] = Field(..., description="Rows are true classes")
    average: Literal["macro", "weighted"] = "macro"
    total: int = Field(..., ge=0)


class EpochRecord(BaseModel):
    """One row of the per-epoch metric CSV."""

    epoch: int = Field(..., ge=0)
    split: str
    accuracy: float
    precision: float
    f1: float
    gm: float
    loss: float

    @classmethod
    def from_report(cls, epoch: int, split: str, report: MetricsReport, loss: float) -> "EpochRecord":
        return cls(
            epoch=epoch,
            split=split,
            accuracy=report.accuracy,
            precision=report.precision,
            f1=report.macro_f1,
            gm=report.geometric_mean,
            loss=loss,
        )
