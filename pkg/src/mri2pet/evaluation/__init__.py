from .metrics import MetricsReport, image_metrics, evaluate_volume_pairs
from .fairness import FairnessReport, fairness_report, rank_sum_test, bonferroni
from .classification import ClassificationReport, classify_cv
from .ablation import ABLATION_CELLS, run_ablation

__all__ = [
    "MetricsReport",
    "image_metrics",
    "evaluate_volume_pairs",
    "FairnessReport",
    "fairness_report",
    "rank_sum_test",
    "bonferroni",
    "ClassificationReport",
    "classify_cv",
    "ABLATION_CELLS",
    "run_ablation",
]
