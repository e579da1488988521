"""CAR-Forest: alternate a random forest on the decorrelated target with a
Leroux CAR model that takes the forest's predictions as a fixed offset.

Stage 0 sets the training random effects to zero.  Each of the ``R``
iterations then

1. forms ``Z = Y - phi`` on the training units,
2. fits a forest to ``(x, Z)``; training offsets are out-of-bag predictions
   and test offsets are full-forest predictions,
3. fits the CAR model (intercept only) on the joint training + test graph
   with that offset, and updates ``phi`` to the posterior mean on the
   training units.

The final CAR posterior predictive gives the test predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .car import CarFit, CarFitError, CarPriors, fit_car_arrays, predict_car
from .cholesky import SymbolicCholesky
from .data import ArealDataset, DataError
from .forest import Forest, ForestConfig, ForestError, fit_forest
from .graph import knn_adjacency, laplacian
from .prediction import PredictionSet

INTERVAL_MODES = ("plugin", "grid")


class CarForestError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class CarForestConfig:
    r_iterations: int = 5
    d_param: int = 7
    forest: ForestConfig = ForestConfig()
    interval_mode: str = "grid"
    warm_start: bool = True  # start iteration r >= 2 from the previous mode

    def validate(self) -> None:
        if self.r_iterations < 1:
            raise ValueError("r_iterations must be at least 1")
        if self.d_param < 1:
            raise ValueError("d_param must be at least 1")
        if self.interval_mode not in INTERVAL_MODES:
            raise ValueError(f"interval_mode must be one of {INTERVAL_MODES}")

    def to_dict(self) -> dict:
        return {
            "r_iterations": self.r_iterations,
            "d_param": self.d_param,
            "forest": self.forest.to_dict(),
            "interval_mode": self.interval_mode,
            "warm_start": self.warm_start,
        }


@dataclass
class IterationRecord:
    iteration: int
    forest: Forest = field(repr=False)
    car: CarFit = field(repr=False)
    offset: np.ndarray = field(repr=False)  # joint order: training then test
    residual_rmse: float  # training RMSE of Y - offset - b0 - phi
    test_point: np.ndarray = field(repr=False)  # posterior-mean test prediction

    def summary(self) -> dict:
        hy = self.car.hyper
        return {
            "iteration": self.iteration,
            "rho": hy.rho,
            "tau": hy.tau,
            "sigma2": hy.sigma2,
            "intercept": self.car.beta0,
            "log_marginal_posterior": self.car.log_posterior,
            "training_residual_rmse": self.residual_rmse,
            "oob_rmse": float(np.sqrt(np.mean(self.forest.oob_errors**2))),
        }


@dataclass
class CarForestFit:
    config: CarForestConfig
    history: list[IterationRecord]
    z_last: np.ndarray  # decorrelated target of the final iteration
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    @property
    def final_car(self) -> CarFit:
        return self.history[-1].car

    @property
    def final_forest(self) -> Forest:
        return self.history[-1].forest

    @property
    def test_offset(self) -> np.ndarray:
        return self.history[-1].offset[len(self.train_ids):]

    def to_dict(self) -> dict:
        car = self.final_car
        return {
            "config": self.config.to_dict(),
            "history": [rec.summary() for rec in self.history],
            "final_car": car.to_dict(),
            "decorrelated_target": self.z_last.tolist(),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        }


def _checked_training(train: ArealDataset) -> None:
    if train.n_total == 0:
        raise DataError("no training units with observed targets")
    if not np.all(train.observed):
        raise DataError("every training unit needs an observed target")


def run_carforest(
    train: ArealDataset,
    test: ArealDataset,
    cfg: CarForestConfig = CarForestConfig(),
    priors: CarPriors = CarPriors(),
    *,
    n_jobs: int | None = None,
    predict: bool = True,
) -> tuple[CarForestFit, PredictionSet | None]:
    """Fit CAR-Forest on ``train`` and predict ``test`` (targets optional).

    Targets are taken as given, normally already on the log scale.  Every
    iteration's posterior-mean test prediction is kept in the history so
    that all smaller iteration counts can be scored from one run.
    """
    cfg.validate()
    _checked_training(train)
    if test.p != train.p:
        raise DataError(f"test has {test.p} features, training has {train.p}")
    joint = train.concat(test)
    k = train.n_total
    w_joint = knn_adjacency(joint.coords, cfg.d_param)
    symbolic = SymbolicCholesky(laplacian(w_joint.w) + sp.identity(joint.n_total, format="csc"))
    obs_index = np.arange(k)
    y = train.target

    phi = np.zeros(k)
    history: list[IterationRecord] = []
    prev_h = None
    z = y
    for r in range(1, cfg.r_iterations + 1):
        z = y - phi
        try:
            forest = fit_forest(train.features, z, cfg.forest, row_keys=train.ids, n_jobs=n_jobs)
        except (ForestError, ValueError) as exc:
            raise CarForestError(f"iteration {r}: forest fit failed: {exc}", r) from exc
        offset = np.concatenate([forest.oob_pred, forest.predict(test.features)])
        starts = [prev_h] if (cfg.warm_start and prev_h is not None) else None
        try:
            car = fit_car_arrays(
                y,
                obs_index,
                w_joint,
                ids=joint.ids,
                offset=offset,
                features_in_mean=False,
                priors=priors,
                starts=starts,
                symbolic=symbolic,
                grid=False,
            )
        except (CarFitError, ValueError) as exc:
            raise CarForestError(f"iteration {r}: CAR fit failed: {exc}", r) from exc
        prev_h = car.h_mode
        phi = car.mean_phi[:k].copy()
        fitted = offset[:k] + car.beta0 + phi
        test_point = offset[k:] + car.beta0 + car.mean_phi[k:]
        history.append(
            IterationRecord(
                iteration=r,
                forest=forest,
                car=car,
                offset=offset,
                residual_rmse=float(np.sqrt(np.mean((y - fitted) ** 2))),
                test_point=test_point,
            )
        )

    fit = CarForestFit(config=cfg, history=history, z_last=z, train_ids=train.ids, test_ids=test.ids)
    if not predict:
        return fit, None
    return fit, predict_carforest(fit)


def predict_carforest(fit: CarForestFit, seed: int = 0) -> PredictionSet:
    """Posterior predictive point and 95% interval for the test units."""
    car = fit.final_car
    test_index = np.arange(len(fit.train_ids), len(fit.train_ids) + len(fit.test_ids))
    try:
        return predict_car(car, test_index, mode=fit.config.interval_mode, seed=seed)
    except CarFitError as exc:
        raise CarForestError(f"prediction failed: {exc}", fit.config.r_iterations) from exc


def predict_missing(
    full_ds: ArealDataset,
    cfg: CarForestConfig = CarForestConfig(),
    priors: CarPriors = CarPriors(),
    *,
    n_jobs: int | None = None,
) -> tuple[CarForestFit, PredictionSet]:
    """Train on the observed units and predict those with missing targets."""
    obs = full_ds.observed
    if not obs.any():
        raise DataError("no observed targets to train on")
    if obs.all():
        raise DataError("nothing to predict: every unit has an observed target")
    train = full_ds.subset(np.flatnonzero(obs))
    test = full_ds.subset(np.flatnonzero(~obs))
    fit, pred = run_carforest(train, test, cfg, priors, n_jobs=n_jobs)
    return fit, pred
