"""CAR-Forest: random forests fused with a Leroux CAR model for areal data."""

__version__ = "0.1.0"

from .car import CarFit, CarFitError, CarPriors, Hyper, fit_car, predict_car
from .data import (
    ArealDataset,
    ArealUnit,
    ColumnSchema,
    CsvParseError,
    DataError,
    SimulationScenario,
    knn_impute,
    load_csv,
    log_target,
    pca_reduce,
    simulate,
    simulate_with_truth,
    standardize,
    train_test_split,
    write_csv,
)
from .evaluate import (
    ModelSpec,
    TuningGrid,
    backtransform,
    benchmark,
    coverage,
    cv_tune,
    interval_width,
    mae,
    rmse,
)
from .forest import Forest, ForestConfig, fit_forest, interval_oob, oob_predict, oob_variance, predict_forest
from .fusion import CarForestConfig, CarForestFit, predict_missing, run_carforest
from .graph import NeighbourhoodMatrix, knn_adjacency, leroux_precision
from .grf import GrfConfig, fit_predict_grf
from .linear import fit_lm, predict_lm
from .models import ModelSettings
from .prediction import PredictionSet
