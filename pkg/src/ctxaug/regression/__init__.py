from .design import DesignResult, build_design
from .lmm import RemlProblem, fit, fit_lmm, reml_problem
from .model import (
    BASELINES,
    ModelSpec,
    RegressionFitReport,
    RegressionRow,
    format_table,
    predict_moderated,
    stars,
)
from .ols import fit_ols_cluster

__all__ = [
    "BASELINES",
    "DesignResult",
    "ModelSpec",
    "RegressionFitReport",
    "RegressionRow",
    "RemlProblem",
    "build_design",
    "fit",
    "fit_lmm",
    "fit_ols_cluster",
    "format_table",
    "predict_moderated",
    "reml_problem",
    "stars",
]
