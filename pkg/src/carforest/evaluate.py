"""Metrics, log-normal back-transformation, cross-validated tuning and the
repeated train/test benchmark.
"""

from __future__ import annotations

import csv
import io
import itertools
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ._parallel import get_n_jobs, parallel_map
from .data import ArealDataset, train_test_split
from .models import (
    DISPLAY_NAMES,
    PARAMETERS,
    SHARED_PARAMETER,
    ModelSettings,
    check_kind,
    family_points,
    fit_predict,
    n_model_features,
)
from .prediction import PredictionSet

METRIC_NAMES = ("rmse", "mae", "cp", "aiw")

DEFAULT_GRIDS = {
    "D": (3, 5, 7, 9),
    "m_try": (10, 20, 30, 40, None),  # None: all features
    "min_node": (1, 5, 10),
    "R": (1, 2, 3, 4, 5),
    "bw": (100, 500, 1000),
    "alpha": (0.25, 0.5, 0.75, 1.0),
}


class EvaluationError(RuntimeError):
    pass


# -- metrics ---------------------------------------------------------------


def _pair(pred, obs) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if len(pred) != len(obs):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(obs)} observations")
    if len(pred) == 0:
        raise ValueError("no predictions to score")
    return pred, obs


def rmse(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def mae(pred, obs) -> float:
    """Median absolute error."""
    pred, obs = _pair(pred, obs)
    return float(np.median(np.abs(pred - obs)))


def _intervals(lower, upper) -> tuple[np.ndarray, np.ndarray]:
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    if len(lower) != len(upper):
        raise ValueError("lower and upper bounds differ in length")
    bad = np.flatnonzero(lower > upper)
    if bad.size:
        raise ValueError(f"inverted interval at position {bad[0]}: [{lower[bad[0]]}, {upper[bad[0]]}]")
    return lower, upper


def coverage(lower, upper, obs) -> float:
    """Fraction of observations inside their closed interval."""
    lower, upper = _intervals(lower, upper)
    _, obs = _pair(lower, obs)
    return float(np.mean((obs >= lower) & (obs <= upper)))


def interval_width(lower, upper) -> float:
    lower, upper = _intervals(lower, upper)
    if len(lower) == 0:
        raise ValueError("no intervals")
    return float(np.mean(upper - lower))


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    cp: float
    aiw: float

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "cp": self.cp, "aiw": self.aiw}


def score(pred: PredictionSet, obs) -> Metrics:
    return Metrics(
        rmse=rmse(pred.point, obs),
        mae=mae(pred.point, obs),
        cp=coverage(pred.lower, pred.upper, obs),
        aiw=interval_width(pred.lower, pred.upper),
    )


def backtransform(pred: PredictionSet, sigma2=None) -> PredictionSet:
    """Map log-scale predictions to the original scale.

    The point becomes ``exp(mu + sigma2 / 2)``, the log-normal mean; the
    interval endpoints are exponentiated.  ``sigma2`` (scalar or per unit)
    defaults to the prediction set's own predictive variance.
    """
    if pred.scale != "log":
        raise ValueError("predictions are already on the original scale")
    if sigma2 is None:
        if pred.variance is None:
            raise ValueError("no variance available for the back-transformation")
        sigma2 = pred.variance
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), pred.point.shape)
    if np.any(sigma2 < 0):
        raise ValueError("variance must be non-negative")
    return replace(
        pred,
        point=np.exp(pred.point + 0.5 * sigma2),
        lower=np.exp(pred.lower),
        upper=np.exp(pred.upper),
        scale="original",
        variance=None,
    )


def naive_backtransform(pred: PredictionSet) -> PredictionSet:
    """Plain exponentiation (biased low for log-normal targets)."""
    return backtransform(pred, 0.0)


# -- tuning ----------------------------------------------------------------


@dataclass(frozen=True)
class TuningGrid:
    kind: str
    values: dict  # parameter -> tuple of candidates, in grid order

    def __post_init__(self):
        check_kind(self.kind)
        names = PARAMETERS[self.kind]
        unknown = set(self.values) - set(names)
        if unknown:
            raise ValueError(f"{self.kind} has no tuning parameter(s) {sorted(unknown)}")
        missing = [n for n in names if n not in self.values]
        if missing:
            raise ValueError(f"{self.kind} grid lacks {missing}")
        for name, cand in self.values.items():
            if len(cand) == 0:
                raise ValueError(f"empty candidate list for {name}")

    @classmethod
    def default(cls, kind: str, n_features: int, **overrides) -> "TuningGrid":
        """The published candidate lists, with m_try clamped to the feature count."""
        check_kind(kind)
        values = {}
        for name in PARAMETERS[kind]:
            values[name] = tuple(overrides.get(name, DEFAULT_GRIDS[name]))
        if "m_try" in values:
            values["m_try"] = clamp_mtry(values["m_try"], n_features)
        return cls(kind, values)

    def combinations(self) -> list[dict]:
        names = PARAMETERS[self.kind]
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.values[n] for n in names))]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": {k: list(v) for k, v in self.values.items()}}


def clamp_mtry(candidates, p: int) -> tuple[int, ...]:
    """Clamp to [1, p], make sure p itself is present, drop duplicates."""
    out = []
    for m in candidates:
        m = p if m is None else min(max(int(m), 1), p)
        if m not in out:
            out.append(m)
    if p not in out:
        out.append(p)
    return tuple(out)


@dataclass
class TuningResult:
    kind: str
    seed: int
    folds: np.ndarray  # fold label per training unit
    combinations: list[dict]
    scores: list[float | None]  # pooled CV RMSE, None when disqualified
    failures: dict = field(default_factory=dict)  # combination index -> reason
    chosen_index: int = 0

    @property
    def chosen(self) -> dict:
        return self.combinations[self.chosen_index]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "fold_sizes": np.bincount(self.folds).tolist(),
            "folds": self.folds.tolist(),
            "combinations": [
                {"params": c, "cv_rmse": s, "failure": self.failures.get(i)}
                for i, (c, s) in enumerate(zip(self.combinations, self.scores))
            ],
            "chosen": self.chosen,
        }


def cv_folds(n: int, folds: int, seed: int) -> np.ndarray:
    """Random fold label per unit; fold sizes differ by at most one."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise ValueError(f"cannot split {n} units into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        labels[chunk] = f
    return labels


def _families(grid: TuningGrid) -> list[tuple[dict, list[int], list]]:
    """Group combinations that one fit can score together."""
    combos = grid.combinations()
    shared = SHARED_PARAMETER.get(grid.kind)
    groups: dict = {}
    for i, c in enumerate(combos):
        base = {k: v for k, v in c.items() if k != shared}
        key = tuple(sorted(base.items()))
        entry = groups.setdefault(key, (base, [], []))
        entry[1].append(i)
        entry[2].append(c.get(shared))
    return list(groups.values())


def cv_tune(
    train: ArealDataset,
    kind: str,
    grid: TuningGrid,
    folds: int = 10,
    seed: int = 0,
    settings: ModelSettings = ModelSettings(),
    n_jobs: int | None = None,
) -> TuningResult:
    """Choose the combination with the smallest pooled cross-validated RMSE
    on the modelling scale; ties go to the earliest combination in grid order.
    """
    if grid.kind != kind:
        raise ValueError(f"grid is for {grid.kind!r}, not {kind!r}")
    combos = grid.combinations()
    labels = cv_folds(train.n_total, folds, seed)
    if len(combos) == 1:
        return TuningResult(kind, seed, labels, combos, [None], {}, 0)

    fams = _families(grid)
    tasks = [(fi, f) for fi in range(len(fams)) for f in range(folds)]
    jobs = get_n_jobs() if n_jobs is None else n_jobs
    inner = 1 if jobs > 1 else None

    def run(task):
        fi, f = task
        base, _, shared_values = fams[fi]
        tr = train.subset(np.flatnonzero(labels != f))
        va = train.subset(np.flatnonzero(labels == f))
        try:
            return family_points(kind, base, shared_values, tr, va, settings, inner), None
        except Exception as exc:  # a failing combination is disqualified, not fatal
            return None, f"fold {f}: {type(exc).__name__}: {exc}"

    results = dict(zip(tasks, parallel_map(run, tasks, jobs)))

    scores: list[float | None] = [None] * len(combos)
    failures: dict = {}
    for fi, (_, members, _) in enumerate(fams):
        pooled = np.empty((len(members), train.n_total))
        reason = None
        for f in range(folds):
            points, err = results[(fi, f)]
            if err is not None:
                reason = reason or err
                continue
            idx = np.flatnonzero(labels == f)
            for j, pt in enumerate(points):
                pooled[j, idx] = pt
        for j, ci in enumerate(members):
            if reason is not None:
                failures[ci] = reason
            else:
                scores[ci] = rmse(pooled[j], train.target)
    valid = [i for i, s in enumerate(scores) if s is not None]
    if not valid:
        raise EvaluationError(f"every {kind} combination failed; first reason: {failures[0]}")
    best = min(valid, key=lambda i: (scores[i], i))
    return TuningResult(kind, seed, labels, combos, scores, failures, best)


def mode_of_optima(chosen: list[dict]) -> dict:
    """Per-parameter mode of the chosen values; ties go to the smaller value."""
    if not chosen:
        return {}
    out = {}
    for name in chosen[0]:
        counts = Counter(c[name] for c in chosen)
        top = max(counts.values())
        out[name] = min(v for v, k in counts.items() if k == top)
    return out


# -- benchmark -------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """A model to benchmark.

    ``predictor``, if given, replaces fitting and tuning altogether: it is
    called as ``predictor(train, test)`` and must return a
    :class:`PredictionSet` on the modelling scale.  ``kind`` is then only a
    label.
    """

    kind: str
    grid: TuningGrid | None = None  # None: published defaults
    predictor: Callable[[ArealDataset, ArealDataset], PredictionSet] | None = None

    def resolved_grid(self, ds: ArealDataset) -> TuningGrid:
        return self.grid or TuningGrid.default(self.kind, n_model_features(self.kind, ds))


def split_seed(seed: int, split: int) -> int:
    return int(np.random.SeedSequence([seed, split]).generate_state(1)[0])


def observed_original(ds: ArealDataset) -> np.ndarray:
    return np.exp(ds.target) if ds.target_scale == "log" else ds.target.copy()


def to_original(pred: PredictionSet, ds: ArealDataset) -> PredictionSet:
    return backtransform(pred) if ds.target_scale == "log" else replace(pred, scale="original")


@dataclass
class BenchmarkReport:
    models: list[str]
    n_splits: int
    seed: int
    metrics: dict  # metric -> model -> list of per-split values
    tuning: dict  # model -> list of per-split chosen params
    deployment: dict  # model -> mode of optima
    settings: dict
    config: dict
    predictions: dict = field(default_factory=dict)  # model -> list of per-split PredictionSet
    observed: list = field(default_factory=list)  # per split (ids, values)
    groups: dict = field(default_factory=dict)  # model -> group -> list of per-split Metrics dicts

    def table(self) -> dict:
        """metric -> model -> per-split values followed by their mean."""
        out = {}
        for m in METRIC_NAMES:
            out[m] = {}
            for name in self.models:
                vals = self.metrics[m][name]
                out[m][name] = [*vals, float(np.mean(vals))]
        return out

    def rows(self) -> list[dict]:
        """One row per metric x model x (split, mean)."""
        rows = []
        for m, per_model in self.table().items():
            for name, vals in per_model.items():
                for s, v in enumerate(vals):
                    label = str(s + 1) if s < self.n_splits else "mean"
                    rows.append({"metric": m, "model": name, "split": label, "value": v})
        return rows

    def to_dict(self) -> dict:
        d = {
            "config": self.config,
            "settings": self.settings,
            "seed": self.seed,
            "n_splits": self.n_splits,
            "models": self.models,
            "table": self.table(),
            "tuning": self.tuning,
            "deployment": self.deployment,
        }
        if self.groups:
            d["groups"] = self.groups
        return d

    def to_text(self) -> str:
        headers = ["Model", *[str(s + 1) for s in range(self.n_splits)], "Mean"]
        lines = []
        for m, per_model in self.table().items():
            body = []
            biggest = max(abs(v) for vals in per_model.values() for v in vals)
            fmt = "{:.3f}" if m == "cp" or biggest < 1000 else "{:,.0f}"
            for name, vals in per_model.items():
                body.append([DISPLAY_NAMES.get(name, name), *[fmt.format(v) for v in vals]])
            widths = [max(len(r[j]) for r in [headers, *body]) for j in range(len(headers))]
            lines.append(m.upper())
            lines.append("  ".join(h.ljust(widths[0]) if j == 0 else h.rjust(widths[j]) for j, h in enumerate(headers)))
            for r in body:
                lines.append("  ".join(c.ljust(widths[0]) if j == 0 else c.rjust(widths[j]) for j, c in enumerate(r)))
            lines.append("")
        return "\n".join(lines)

    def predictions_csv(self) -> str:
        """Long-format test predictions (original scale) for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "model", "id", "observed", "point", "lower95", "upper95"])
        for name in self.models:
            for s, pred in enumerate(self.predictions.get(name, [])):
                ids, obs = self.observed[s]
                for k, uid in enumerate(ids):
                    w.writerow([s + 1, name, uid, repr(float(obs[k])), repr(float(pred.point[k])),
                                repr(float(pred.lower[k])), repr(float(pred.upper[k]))])
        return buf.getvalue()

    def group_metrics_csv(self) -> str:
        """Per-group RMSE/MAE averaged over splits, for RMSE-vs-MAE scatter plots."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "group", "rmse", "mae", "cp", "aiw"])
        for name in self.models:
            for g, per_split in self.groups.get(name, {}).items():
                vals = [np.mean([d[m] for d in per_split]) for m in METRIC_NAMES]
                w.writerow([name, g, *[repr(float(v)) for v in vals]])
        return buf.getvalue()


def benchmark(
    ds: ArealDataset,
    models: list[ModelSpec],
    n_splits: int = 5,
    train_fraction: float = 0.8,
    seed: int = 0,
    folds: int = 10,
    settings: ModelSettings = ModelSettings(),
    n_jobs: int | None = None,
    by_group: bool = False,
) -> BenchmarkReport:
    """Repeated train/test evaluation with per-split tuning.

    For each split every model is tuned by cross-validation on the training
    part, refitted at its optimum, used to predict the test part and scored
    on the original scale after back-transformation.
    """
    if not models:
        raise ValueError("no models to benchmark")
    obs_ds = ds.subset(np.flatnonzero(ds.observed))
    names = [m.kind for m in models]
    if len(set(names)) != len(names):
        raise ValueError("each model kind may appear only once")
    metrics = {m: {name: [] for name in names} for m in METRIC_NAMES}
    tuning = {name: [] for name in names}
    predictions = {name: [] for name in names}
    groups: dict = {name: {} for name in names}
    observed = []
    for s in range(n_splits):
        sseed = split_seed(seed, s)
        train, test = train_test_split(obs_ds, train_fraction, seed=sseed)
        obs = observed_original(test)
        observed.append((test.ids, obs))
        for spec in models:
            try:
                if spec.predictor is not None:
                    chosen = {}
                    pred = spec.predictor(train, test)
                else:
                    grid = spec.resolved_grid(train)
                    chosen = cv_tune(train, spec.kind, grid, folds, sseed, settings, n_jobs).chosen
                    pred, _ = fit_predict(spec.kind, chosen, train, test, settings, n_jobs)
                pred = to_original(pred, test)
            except Exception as exc:
                raise EvaluationError(f"split {s + 1}, model {spec.kind}: {exc}") from exc
            tuning[spec.kind].append(chosen)
            predictions[spec.kind].append(pred)
            met = score(pred, obs)
            for m in METRIC_NAMES:
                metrics[m][spec.kind].append(getattr(met, m))
            if by_group and test.groups is not None:
                labels = np.asarray(test.groups, dtype=object)
                for g in sorted(set(test.groups)):
                    idx = np.flatnonzero(labels == g)
                    gm = score(pred.subset(idx), obs[idx]).to_dict()
                    groups[spec.kind].setdefault(g, []).append(gm)
    return BenchmarkReport(
        models=names,
        n_splits=n_splits,
        seed=seed,
        metrics=metrics,
        tuning=tuning,
        deployment={name: mode_of_optima(tuning[name]) for name in names},
        settings=settings.to_dict(),
        config={
            "train_fraction": train_fraction,
            "folds": folds,
            "grids": {spec.kind: spec.resolved_grid(obs_ds).to_dict() for spec in models if spec.predictor is None},
            "target_scale": ds.target_scale,
        },
        predictions=predictions,
        observed=observed,
        groups=groups if by_group else {},
    )


__all__ = [
    "BenchmarkReport",
    "EvaluationError",
    "Metrics",
    "ModelSpec",
    "DEFAULT_GRIDS",
    "TuningGrid",
    "TuningResult",
    "backtransform",
    "benchmark",
    "clamp_mtry",
    "coverage",
    "cv_folds",
    "cv_tune",
    "interval_width",
    "mae",
    "mode_of_optima",
    "naive_backtransform",
    "rmse",
    "score",
]
