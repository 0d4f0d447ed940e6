"""From-scratch regression tree learners."""

from .ensembles import (
    DEFAULT_PARAMS,
    KINDS,
    Ensemble,
    adaboost_r2_update,
    feature_importance,
    fit_adaboost,
    fit_bagging,
    fit_dt,
    fit_gb,
    fit_model,
    fit_rf,
    fit_xgb,
    predict,
    regularized_objective,
    staged_predict,
    tree_penalty,
    weighted_median,
    xgb_leaf_weight,
    xgb_split_gain,
)
from .persistence import dumps_model, load_model, save_model
from .tree import RegressionTree, best_split_variance, fit_cart, fit_tree, scan_splits

__all__ = [
    "DEFAULT_PARAMS", "KINDS", "Ensemble", "RegressionTree", "adaboost_r2_update", "best_split_variance",
    "dumps_model", "feature_importance", "fit_adaboost", "fit_bagging", "fit_cart", "fit_dt", "fit_gb",
    "fit_model", "fit_rf", "fit_tree", "fit_xgb", "load_model", "predict", "regularized_objective",
    "save_model", "scan_splits", "staged_predict", "tree_penalty", "weighted_median", "xgb_leaf_weight",
    "xgb_split_gain",
]
