"""Uniform fit-and-predict interface over the five compared models.

Model kinds: ``lm``, ``car``, ``rf``, ``grf`` and ``carforest``.  The
a-spatial and forest-based benchmarks (``lm``, ``rf``, ``grf``) see the
centroid coordinates as two extra features; the CAR-based models get the
spatial structure from the neighbourhood graph instead.

Every prediction is on the modelling scale and carries a predictive
variance for the log-normal back-transformation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .car import CarPriors, fit_car, predict_car
from .data import ArealDataset
from .forest import ForestConfig, fit_forest, interval_oob, oob_variance
from .fusion import CarForestConfig, run_carforest
from .grf import GrfConfig, fit_predict_grf_arrays, prediction_set
from .linear import fit_lm_arrays, predict_lm_arrays
from .prediction import PredictionSet

MODEL_KINDS = ("lm", "car", "rf", "grf", "carforest")
DISPLAY_NAMES = {"lm": "LM", "car": "CAR", "rf": "RF", "grf": "GRF", "carforest": "CAR-Forest"}

# Tuning parameters per kind, and the one (if any) whose values can all be
# scored from a single fit of the others.
PARAMETERS = {
    "lm": (),
    "car": ("D",),
    "rf": ("m_try", "min_node"),
    "grf": ("m_try", "min_node", "bw", "alpha"),
    "carforest": ("D", "m_try", "min_node", "R"),
}
SHARED_PARAMETER = {"grf": "alpha", "carforest": "R"}


@dataclass(frozen=True)
class ModelSettings:
    """Fixed (untuned) settings shared by all models in a run."""

    n_trees: int = 1000
    local_n_trees: int = 100
    seed: int = 0
    interval_mode: str = "grid"  # final fits; CV scoring always uses plug-in means
    priors: CarPriors = CarPriors()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["priors"] = asdict(self.priors)
        return d


def check_kind(kind: str) -> None:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")


def spatial_features(ds: ArealDataset) -> np.ndarray:
    """Features with easting and northing appended."""
    return np.column_stack([ds.features, ds.coords])


def n_model_features(kind: str, ds: ArealDataset) -> int:
    return ds.p + 2 if kind in ("lm", "rf", "grf") else ds.p


def _forest_cfg(params: dict, settings: ModelSettings) -> ForestConfig:
    return ForestConfig(
        n_trees=settings.n_trees,
        m_try=params.get("m_try"),
        min_node=params.get("min_node", 5),
        seed=settings.seed,
    )


def _grf_cfg(params: dict, settings: ModelSettings, alpha: float) -> GrfConfig:
    return GrfConfig(
        global_forest=_forest_cfg(params, settings),
        local_n_trees=settings.local_n_trees,
        bw=params["bw"],
        alpha=alpha,
    )


def _carforest_cfg(params: dict, settings: ModelSettings, r: int) -> CarForestConfig:
    return CarForestConfig(
        r_iterations=r,
        d_param=params["D"],
        forest=_forest_cfg(params, settings),
        interval_mode=settings.interval_mode,
    )


def fit_predict(
    kind: str,
    params: dict,
    train: ArealDataset,
    test: ArealDataset,
    settings: ModelSettings = ModelSettings(),
    n_jobs: int | None = None,
) -> tuple[PredictionSet, dict]:
    """Fit ``kind`` with tuning ``params`` on ``train``; predict ``test``.

    Returns the predictions and a JSON-ready summary of the fit.
    """
    check_kind(kind)
    if kind == "lm":
        names = (*train.feature_names, "easting", "northing")
        fit = fit_lm_arrays(spatial_features(train), train.target, names=names)
        return predict_lm_arrays(fit, spatial_features(test), ids=test.ids), {"lm": fit.to_dict()}
    if kind == "car":
        fit = fit_car(train, test, d=params["D"], priors=settings.priors, grid=settings.interval_mode == "grid")
        pred = predict_car(fit, mode=settings.interval_mode, seed=settings.seed)
        summary = fit.to_dict()
        for key in ("phi_mean", "offset", "ids"):
            summary.pop(key)
        return pred, {"car": summary}
    if kind == "rf":
        forest = fit_forest(spatial_features(train), train.target, _forest_cfg(params, settings),
                            row_keys=train.ids, n_jobs=n_jobs)
        point = forest.predict(spatial_features(test))
        lower, upper = interval_oob(forest, point)
        pred = PredictionSet(test.ids, point, lower, upper, scale="log", variance=oob_variance(forest))
        return pred, {"rf": {"oob_variance": oob_variance(forest), "n_trees": forest.n_trees}}
    if kind == "grf":
        cfg = _grf_cfg(params, settings, params["alpha"])
        res = fit_predict_grf_arrays(spatial_features(train), train.target, train.coords,
                                     spatial_features(test), test.coords, cfg, n_jobs)
        pred = prediction_set(res, cfg.alpha, test.ids)
        return pred, {"grf": {"oob_variance": oob_variance(res.global_forest)}}
    cfg = _carforest_cfg(params, settings, params["R"])
    fit, pred = run_carforest(train, test, cfg, settings.priors, n_jobs=n_jobs)
    summary = {"config": cfg.to_dict(), "history": [rec.summary() for rec in fit.history]}
    return pred, {"carforest": summary}


def family_points(
    kind: str,
    base: dict,
    shared_values,
    train: ArealDataset,
    test: ArealDataset,
    settings: ModelSettings = ModelSettings(),
    n_jobs: int | None = None,
) -> list[np.ndarray]:
    """Point predictions for every value of the kind's shared parameter.

    ``grf`` fits once and blends every ``alpha``; ``carforest`` runs up to
    the largest ``R`` and reads each smaller ``R`` from the history.  Other
    kinds take ``shared_values = [None]``.
    """
    check_kind(kind)
    if kind == "grf":
        cfg = _grf_cfg(base, settings, 0.5)
        res = fit_predict_grf_arrays(spatial_features(train), train.target, train.coords,
                                     spatial_features(test), test.coords, cfg, n_jobs)
        return [res.blend(a) for a in shared_values]
    if kind == "carforest":
        cfg = _carforest_cfg(base, settings, max(shared_values))
        fit, _ = run_carforest(train, test, cfg, settings.priors, n_jobs=n_jobs, predict=False)
        return [fit.history[r - 1].test_point for r in shared_values]
    if kind in ("car", "lm"):
        # points only: skip the grid even in grid mode
        plug = ModelSettings(settings.n_trees, settings.local_n_trees, settings.seed, "plugin", settings.priors)
        return [fit_predict(kind, base, train, test, plug, n_jobs)[0].point for _ in shared_values]
    forest = fit_forest(spatial_features(train), train.target, _forest_cfg(base, settings),
                        row_keys=train.ids, n_jobs=n_jobs)
    return [forest.predict(spatial_features(test)) for _ in shared_values]
