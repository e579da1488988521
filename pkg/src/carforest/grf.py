"""Geographically weighted random forest.

A global forest is fitted once; every prediction unit also gets a local
forest grown on its ``bw`` nearest training units.  The point prediction
is ``alpha * local + (1 - alpha) * global`` and the interval comes from the
global forest's out-of-bag errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import parallel_map
from .forest import Forest, ForestConfig, fit_forest, interval_oob, oob_variance
from .graph import nearest_indices
from .prediction import PredictionSet

DEFAULT_BW_GRID = (100, 500, 1000)
DEFAULT_ALPHA_GRID = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class GrfConfig:
    global_forest: ForestConfig = ForestConfig()
    local_n_trees: int = 100
    bw: int = 100
    alpha: float = 0.5
    local_seed: int | None = None  # None: reuse the global seed

    def validate(self, n_train: int) -> None:
        if not 1 <= self.bw <= n_train:
            raise ValueError(f"bw={self.bw} must lie in [1, {n_train}]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} must lie in [0, 1]")
        if self.local_n_trees < 1:
            raise ValueError("local_n_trees must be at least 1")


@dataclass
class GrfResult:
    global_forest: Forest
    global_pred: np.ndarray
    local_pred: np.ndarray
    neighbourhoods: np.ndarray  # (n_test, bw) training indices

    def blend(self, alpha: float) -> np.ndarray:
        return alpha * self.local_pred + (1.0 - alpha) * self.global_pred


def local_predictions(x_train, z_train, coords_train, x_test, coords_test, cfg: GrfConfig, n_jobs=None):
    """Local-forest prediction per test unit, plus the neighbourhoods used.

    Units whose neighbourhoods coincide share one local forest.
    """
    nbrs = np.sort(nearest_indices(coords_train, coords_test, cfg.bw), axis=1)
    p = x_train.shape[1]
    gcfg = cfg.global_forest
    local_cfg = ForestConfig(
        n_trees=cfg.local_n_trees,
        m_try=None if gcfg.m_try is None else min(gcfg.m_try, p),
        min_node=gcfg.min_node,
        seed=gcfg.seed if cfg.local_seed is None else cfg.local_seed,
    )
    keys, inverse = np.unique(nbrs, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    groups = [np.flatnonzero(inverse == g) for g in range(len(keys))]

    def run(g):
        rows = keys[g]
        forest = fit_forest(x_train[rows], z_train[rows], local_cfg, n_jobs=1)
        return forest.predict(x_test[groups[g]])

    preds = parallel_map(run, range(len(keys)), n_jobs)
    out = np.empty(len(x_test))
    for g, pr in enumerate(preds):
        out[groups[g]] = pr
    return out, nbrs


def fit_predict_grf_arrays(x_train, z_train, coords_train, x_test, coords_test, cfg: GrfConfig, n_jobs=None) -> GrfResult:
    x_train = np.asarray(x_train, dtype=float)
    x_test = np.asarray(x_test, dtype=float)
    cfg.validate(len(x_train))
    gforest = fit_forest(x_train, z_train, cfg.global_forest, n_jobs=n_jobs)
    gpred = gforest.predict(x_test)
    lpred, nbrs = local_predictions(x_train, z_train, coords_train, x_test, coords_test, cfg, n_jobs)
    return GrfResult(global_forest=gforest, global_pred=gpred, local_pred=lpred, neighbourhoods=nbrs)


def prediction_set(result: GrfResult, alpha: float, ids) -> PredictionSet:
    point = result.blend(alpha)
    lower, upper = interval_oob(result.global_forest, point)
    return PredictionSet(
        ids=tuple(ids),
        point=point,
        lower=lower,
        upper=upper,
        scale="log",
        variance=oob_variance(result.global_forest),
    )


def fit_predict_grf(train, test, cfg: GrfConfig, n_jobs=None) -> PredictionSet:
    """GRF predictions for ``test`` using ``train``'s features and targets."""
    if cfg.bw > train.n_total:
        raise ValueError(f"bw={cfg.bw} exceeds the training size {train.n_total}")
    result = fit_predict_grf_arrays(
        train.features, train.target, train.coords, test.features, test.coords, cfg, n_jobs
    )
    return prediction_set(result, cfg.alpha, test.ids)
