"""Influence functions and relative influence for softmax regression and small MLPs."""

__version__ = "0.1.0"

from .data import Dataset, load_dataset
from .errors import (CapExceededError, ConfigError, ConvergenceError, DataFormatError,
                     DimensionError, InfluxError, LissaDivergenceError,
                     NotPositiveDefiniteError, NumericalError, SolverError, StaleCacheError)
from .evaluation import (LOOResult, MetricReport, SetStats, approximation_metrics,
                         influence_set_stats, knn_indices, knn_overlap, loo_many, loo_retrain,
                         ndcg_at_k, predicted_removal_delta)
from .gradcache import GradCache, build_grad_cache, load_grad_cache, save_grad_cache
from .influence import (DenominatorCache, ExplanationSet, InfluenceScores, influence_all,
                        l_relatif, precompute_denominators, self_influence, theta_relatif, top_k)
from .kernels import BACKEND
from .models import (ModelSpec, ParamVector, exact_hessian, fisher, grad, hvp, init_params, loss,
                     predict_proba)
from .projection import (ProjectedCurvature, ProjectionMatrix, fit_pca, load_projection,
                         projected_hessian, projected_influence, projection_objective,
                         save_projection)
from .solvers import CurvatureOperator, SolverOptions, SolverReport, STest, estimate_scale, s_test, solve
from .training import TrainConfig, train

__all__ = [
    "BACKEND", "CapExceededError", "ConfigError", "ConvergenceError", "CurvatureOperator",
    "DataFormatError", "Dataset", "DenominatorCache", "DimensionError", "ExplanationSet",
    "GradCache", "InfluenceScores", "InfluxError", "LOOResult", "LissaDivergenceError",
    "MetricReport", "ModelSpec", "NotPositiveDefiniteError", "NumericalError", "ParamVector",
    "ProjectedCurvature", "ProjectionMatrix", "STest", "SetStats", "SolverError",
    "SolverOptions", "SolverReport", "StaleCacheError", "TrainConfig", "approximation_metrics",
    "build_grad_cache", "estimate_scale", "exact_hessian", "fisher", "fit_pca", "grad", "hvp",
    "influence_all", "influence_set_stats", "init_params", "knn_indices", "knn_overlap",
    "l_relatif", "load_dataset", "load_grad_cache", "load_projection", "loo_many", "loo_retrain",
    "loss", "ndcg_at_k", "precompute_denominators", "predict_proba", "predicted_removal_delta",
    "projected_hessian", "projected_influence", "projection_objective", "s_test",
    "save_grad_cache", "save_projection", "self_influence", "solve", "theta_relatif", "top_k",
    "train",
]
