"""Areal-unit datasets: CSV I/O, preprocessing, splitting and simulation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cholesky import SymbolicCholesky
from .graph import knn_adjacency, leroux_matrix

MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    """Raised for invalid dataset contents."""


class CsvParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ArealUnit:
    id: str
    centroid: tuple[float, float]
    features: tuple[float, ...]
    target: float | None


@dataclass(frozen=True, eq=False)
class ArealDataset:
    """Column-oriented collection of areal units.

    Missing feature cells and missing targets are stored as NaN.
    """

    ids: tuple[str, ...]
    coords: np.ndarray
    features: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...]
    target_scale: str = "original"
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float).reshape(-1, 2)
        feats = np.array(self.features, dtype=float).reshape(len(coords), -1)
        target = np.array(self.target, dtype=float).reshape(-1)
        ids = tuple(str(i) for i in self.ids)
        if not (len(ids) == len(coords) == len(feats) == len(target)):
            raise DataError("ids, coords, features and target must have equal length")
        if feats.shape[1] != len(self.feature_names):
            raise DataError(
                f"{feats.shape[1]} feature columns but {len(self.feature_names)} feature names"
            )
        if not np.all(np.isfinite(coords)):
            raise DataError("centroid coordinates must be finite")
        seen = set()
        for i in ids:
            if i in seen:
                raise DataError(f"duplicate unit id {i!r}")
            seen.add(i)
        if self.target_scale not in ("original", "log"):
            raise DataError(f"unknown target scale {self.target_scale!r}")
        if self.groups is not None and len(self.groups) != len(ids):
            raise DataError("groups must have one label per unit")
        for arr in (coords, feats, target):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(str(g) for g in self.groups))

    @property
    def n_total(self) -> int:
        return len(self.ids)

    @property
    def n_observed(self) -> int:
        return int(np.sum(~np.isnan(self.target)))

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.target)

    @property
    def units(self) -> list[ArealUnit]:
        return [
            ArealUnit(
                id=self.ids[k],
                centroid=(float(self.coords[k, 0]), float(self.coords[k, 1])),
                features=tuple(float(v) for v in self.features[k]),
                target=None if math.isnan(self.target[k]) else float(self.target[k]),
            )
            for k in range(self.n_total)
        ]

    def subset(self, index) -> "ArealDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            ids=tuple(self.ids[i] for i in index),
            coords=self.coords[index],
            features=self.features[index],
            target=self.target[index],
            groups=None if self.groups is None else tuple(self.groups[i] for i in index),
        )

    def with_target(self, target, scale: str | None = None) -> "ArealDataset":
        return replace(self, target=target, target_scale=scale or self.target_scale)

    def with_features(self, features, names: Sequence[str]) -> "ArealDataset":
        return replace(self, features=features, feature_names=tuple(names))

    def concat(self, other: "ArealDataset") -> "ArealDataset":
        if self.feature_names != other.feature_names:
            raise DataError("cannot concatenate datasets with different features")
        groups = None
        if self.groups is not None and other.groups is not None:
            groups = self.groups + other.groups
        return replace(
            self,
            ids=self.ids + other.ids,
            coords=np.vstack([self.coords, other.coords]),
            features=np.vstack([self.features, other.features]),
            target=np.concatenate([self.target, other.target]),
            groups=groups,
        )

    def equals(self, other: "ArealDataset") -> bool:
        return (
            self.ids == other.ids
            and self.feature_names == other.feature_names
            and self.target_scale == other.target_scale
            and self.groups == other.groups
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features, equal_nan=True)
            and np.array_equal(self.target, other.target, equal_nan=True)
        )


# -- CSV -------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSchema:
    """Column roles for :func:`load_csv`.

    ``features=None`` takes every column not claimed by another role, in file
    order.
    """

    id: str = "id"
    easting: str = "easting"
    northing: str = "northing"
    target: str = "target"
    features: tuple[str, ...] | None = None
    group: str | None = None


def _parse_number(cell: str, *, line: int, column: str, allow_missing: bool) -> float:
    cell = cell.strip()
    if cell in MISSING_TOKENS:
        if allow_missing:
            return math.nan
        raise CsvParseError(f"missing value in column {column!r}", line)
    try:
        value = float(cell)
    except ValueError:
        raise CsvParseError(f"non-numeric value {cell!r} in column {column!r}", line) from None
    if math.isnan(value):
        raise CsvParseError(f"NaN literal in column {column!r}; use an empty cell or NA", line)
    return value


def read_csv_text(text: str, schema: ColumnSchema = ColumnSchema()) -> ArealDataset:
    rows = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise CsvParseError("empty file", 1) from None
    required = [schema.id, schema.easting, schema.northing, schema.target]
    if schema.group:
        required.append(schema.group)
    missing = [c for c in required if c not in header]
    if schema.features is not None:
        missing += [c for c in schema.features if c not in header]
    if missing:
        raise DataError(f"missing columns: {', '.join(missing)}")
    if schema.features is None:
        features = [h for h in header if h not in required]
    else:
        features = list(schema.features)
    pos = {h: i for i, h in enumerate(header)}

    ids, coords, feats, target, groups = [], [], [], [], []
    seen: dict[str, int] = {}
    for line_no, row in enumerate(rows, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise CsvParseError(f"expected {len(header)} fields, found {len(row)}", line_no)
        uid = row[pos[schema.id]].strip()
        if not uid:
            raise CsvParseError("empty id", line_no)
        if uid in seen:
            raise DataError(f"duplicate id {uid!r} (lines {seen[uid]} and {line_no})")
        seen[uid] = line_no
        ids.append(uid)
        coords.append(
            [
                _parse_number(row[pos[c]], line=line_no, column=c, allow_missing=False)
                for c in (schema.easting, schema.northing)
            ]
        )
        feats.append(
            [_parse_number(row[pos[c]], line=line_no, column=c, allow_missing=True) for c in features]
        )
        target.append(
            _parse_number(row[pos[schema.target]], line=line_no, column=schema.target, allow_missing=True)
        )
        if schema.group:
            groups.append(row[pos[schema.group]].strip())
    return ArealDataset(
        ids=tuple(ids),
        coords=np.array(coords, dtype=float).reshape(-1, 2),
        features=np.array(feats, dtype=float).reshape(len(ids), len(features)),
        target=np.array(target, dtype=float),
        feature_names=tuple(features),
        groups=tuple(groups) if schema.group else None,
    )


def load_csv(path, schema: ColumnSchema = ColumnSchema()) -> ArealDataset:
    """Read an areal-unit CSV file.

    Empty cells and ``NA`` mark missing feature or target values.
    """
    return read_csv_text(Path(path).read_text(encoding="utf-8"), schema)


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_csv_text(ds: ArealDataset, schema: ColumnSchema = ColumnSchema()) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = [schema.id, schema.easting, schema.northing, *ds.feature_names, schema.target]
    if ds.groups is not None:
        header.append(schema.group or "group")
    writer.writerow(header)
    for k in range(ds.n_total):
        row = [ds.ids[k], _fmt(ds.coords[k, 0]), _fmt(ds.coords[k, 1])]
        row += [_fmt(v) for v in ds.features[k]]
        row.append(_fmt(ds.target[k]))
        if ds.groups is not None:
            row.append(ds.groups[k])
        writer.writerow(row)
    return buf.getvalue()


def write_csv(ds: ArealDataset, path, schema: ColumnSchema = ColumnSchema()) -> None:
    Path(path).write_text(write_csv_text(ds, schema), encoding="utf-8")


# -- preprocessing ---------------------------------------------------------


@dataclass(frozen=True)
class PcaBlock:
    name: str
    features: tuple[str, ...]
    loadings: np.ndarray  # (len(features), n_components)
    n_components: int
    explained: tuple[float, ...]
    means: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "features": list(self.features),
            "loadings": self.loadings.tolist(),
            "n_components": self.n_components,
            "explained": list(self.explained),
            "means": list(self.means),
        }


@dataclass(frozen=True)
class PreprocessModel:
    impute_k: int = 5
    standardize_params: dict = field(default_factory=dict)  # name -> (mean, sd)
    pca_blocks: tuple[PcaBlock, ...] = ()

    def merged(self, other: "PreprocessModel") -> "PreprocessModel":
        return PreprocessModel(
            impute_k=other.impute_k,
            standardize_params={**self.standardize_params, **other.standardize_params},
            pca_blocks=self.pca_blocks + other.pca_blocks,
        )

    def to_dict(self) -> dict:
        return {
            "impute_k": self.impute_k,
            "standardize": {k: list(v) for k, v in self.standardize_params.items()},
            "pca_blocks": [b.to_dict() for b in self.pca_blocks],
        }


def _zscore(columns: np.ndarray) -> np.ndarray:
    sd = columns.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (columns - columns.mean(axis=0)) / sd


def knn_impute(ds: ArealDataset, k: int = 5) -> ArealDataset:
    """Fill missing feature cells with the mean over the ``k`` nearest units.

    Distance is Euclidean over the z-scored feature columns that have no
    missing cells; ties go to the lower unit index.  Only units observing the
    feature being filled are candidate neighbours.
    """
    x = ds.features
    miss = np.isnan(x)
    if not miss.any():
        return ds
    n = ds.n_total
    if k >= n:
        raise DataError(f"k={k} must be smaller than the number of units ({n})")
    counts = (~miss).sum(axis=0)
    for j, name in enumerate(ds.feature_names):
        if counts[j] == 0:
            raise DataError(f"feature {name!r} is entirely missing")
        if miss[:, j].any() and counts[j] < k:
            raise DataError(f"feature {name!r} has fewer than k={k} observed values")
    complete = ~miss.any(axis=0)
    if not complete.any():
        raise DataError("no complete feature columns to measure distances on")
    z = _zscore(x[:, complete])
    out = x.copy()
    for row in np.flatnonzero(miss.any(axis=1)):
        d2 = np.sum((z - z[row]) ** 2, axis=1)
        for j in np.flatnonzero(miss[row]):
            cand = np.flatnonzero(~miss[:, j])
            order = np.lexsort((cand, d2[cand]))
            out[row, j] = x[cand[order[:k]], j].mean()
    return ds.with_features(out, ds.feature_names)


def standardize(ds: ArealDataset, columns: Sequence[str] | None = None) -> tuple[ArealDataset, PreprocessModel]:
    """Centre and scale feature columns to mean 0 and sample sd 1."""
    names = list(ds.feature_names if columns is None else columns)
    x = ds.features.copy()
    params = {}
    for name in names:
        j = ds.feature_names.index(name)
        col = x[:, j]
        if np.isnan(col).any():
            raise DataError(f"feature {name!r} has missing values; impute first")
        mean = float(col.mean())
        sd = float(col.std(ddof=1))
        if not sd > 0:
            raise DataError(f"feature {name!r} has zero variance")
        x[:, j] = (col - mean) / sd
        params[name] = (mean, sd)
    return ds.with_features(x, ds.feature_names), PreprocessModel(standardize_params=params)


def apply_standardize(ds: ArealDataset, model: PreprocessModel) -> ArealDataset:
    x = ds.features.copy()
    for name, (mean, sd) in model.standardize_params.items():
        j = ds.feature_names.index(name)
        x[:, j] = (x[:, j] - mean) / sd
    return ds.with_features(x, ds.feature_names)


def pca_reduce(
    ds: ArealDataset, block: Sequence[str], threshold: float = 0.95, name: str | None = None
) -> tuple[ArealDataset, PreprocessModel]:
    """Replace a block of correlated features by leading principal components.

    Keeps the fewest components whose cumulative variance fraction reaches
    ``threshold``.  Each loading vector is signed so its largest-magnitude
    entry is positive.  Components are inserted where the first block
    feature was.
    """
    block = list(block)
    if len(block) < 2:
        raise DataError("a PCA block needs at least 2 features")
    if not (0.0 < threshold <= 1.0):
        raise DataError(f"threshold must lie in (0, 1], got {threshold}")
    cols = [ds.feature_names.index(b) for b in block]
    xb = ds.features[:, cols]
    if np.isnan(xb).any():
        raise DataError("PCA block contains missing values")
    means = xb.mean(axis=0)
    xc = xb - means
    cov = np.atleast_2d(np.cov(xc, rowvar=False, ddof=1))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > 1e-12 * max(evals[0], 1e-300)
    evals, evecs = evals[keep], evecs[:, keep]
    frac = evals / evals.sum()
    cum = np.cumsum(frac)
    n_comp = int(np.searchsorted(cum, threshold - 1e-12) + 1)
    n_comp = min(n_comp, len(evals))
    loadings = evecs[:, :n_comp].copy()
    for c in range(n_comp):
        if loadings[np.argmax(np.abs(loadings[:, c])), c] < 0:
            loadings[:, c] = -loadings[:, c]
    scores = xc @ loadings
    prefix = name or block[0]
    pc_names = [f"{prefix}_pc{c + 1}" for c in range(n_comp)]

    first = min(cols)
    names_out, cols_out = [], []
    for j, fname in enumerate(ds.feature_names):
        if j == first:
            names_out += pc_names
            cols_out += [scores[:, c] for c in range(n_comp)]
        if j in cols:
            continue
        names_out.append(fname)
        cols_out.append(ds.features[:, j])
    x_new = np.column_stack(cols_out) if cols_out else np.empty((ds.n_total, 0))
    pblock = PcaBlock(
        name=prefix,
        features=tuple(block),
        loadings=loadings,
        n_components=n_comp,
        explained=tuple(float(f) for f in frac[:n_comp]),
        means=tuple(float(m) for m in means),
    )
    return ds.with_features(x_new, names_out), PreprocessModel(pca_blocks=(pblock,))


def log_target(ds: ArealDataset) -> ArealDataset:
    """Natural log of the observed targets."""
    if ds.target_scale != "original":
        raise DataError("target is already on the log scale")
    y = ds.target
    bad = np.flatnonzero(~np.isnan(y) & (y <= 0))
    if bad.size:
        raise DataError(f"non-positive target {y[bad[0]]!r} for unit {ds.ids[bad[0]]!r}")
    with np.errstate(invalid="ignore"):
        return ds.with_target(np.log(y), scale="log")


def train_test_split(ds: ArealDataset, train_fraction: float = 0.8, seed: int = 0):
    """Randomly partition the observed units into training and test sets.

    The training part gets ``round(train_fraction * n)`` units (at least one,
    leaving at least one for the test part).  Both parts keep the dataset's
    row order.
    """
    if not (0.0 < train_fraction < 1.0):
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    obs = np.flatnonzero(ds.observed)
    n = len(obs)
    if n < 2:
        raise DataError("need at least two observed units to split")
    n_train = min(max(int(math.floor(train_fraction * n + 0.5)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(obs[perm[:n_train]])
    test_idx = np.sort(obs[perm[n_train:]])
    return ds.subset(train_idx), ds.subset(test_idx)


# -- simulation ------------------------------------------------------------


def nonlinear_mean(x: np.ndarray) -> np.ndarray:
    """2 sin(pi x1) + x2^2 - |x3| + x1 x2, using the first three features."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    return 2.0 * np.sin(np.pi * x1) + x2**2 - np.abs(x3) + x1 * x2


@dataclass(frozen=True)
class SimulationScenario:
    n_units: int = 1000
    layout: str = "uniform-random"
    rho_true: float = 0.9
    tau_true: float = 1.0
    sigma2_true: float = 0.25
    mean_function: str = "nonlinear"
    n_features: int = 5
    coefficients: tuple[float, ...] = (1.0, -0.5, 0.75, 0.0, 0.0)
    intercept: float = 0.0
    d_param: int = 5
    extent: float = 100_000.0
    include_spatial: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_units < 10:
            raise DataError("n_units must be at least 10")
        if not (0.0 <= self.rho_true < 1.0):
            raise DataError(f"rho_true must lie in [0, 1) (got {self.rho_true}); rho=1 is improper")
        if not self.tau_true > 0:
            raise DataError("tau_true must be positive")
        if not self.sigma2_true > 0:
            raise DataError("sigma2_true must be positive")
        if self.layout not in ("grid", "uniform-random"):
            raise DataError(f"unknown layout {self.layout!r}")
        if self.mean_function not in ("linear", "nonlinear"):
            raise DataError(f"unknown mean function {self.mean_function!r}")
        if self.mean_function == "nonlinear" and self.n_features < 3:
            raise DataError("the nonlinear mean needs at least 3 features")
        if self.mean_function == "linear" and len(self.coefficients) != self.n_features:
            raise DataError("need one coefficient per feature")
        if not (1 <= self.d_param < self.n_units):
            raise DataError("d_param must lie in [1, n_units)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["coefficients"] = list(self.coefficients)
        return d


@dataclass(frozen=True)
class SimulationTruth:
    phi: np.ndarray
    mean: np.ndarray
    scenario: SimulationScenario

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "phi": self.phi.tolist(),
            "mean": self.mean.tolist(),
        }


def _layout(sc: SimulationScenario, rng: np.random.Generator) -> np.ndarray:
    if sc.layout == "grid":
        side = math.ceil(math.sqrt(sc.n_units))
        step = sc.extent / side
        k = np.arange(sc.n_units)
        return np.column_stack([(k % side + 0.5) * step, (k // side + 0.5) * step])
    return rng.uniform(0.0, sc.extent, size=(sc.n_units, 2))


def sample_leroux(w, rho: float, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Draw phi ~ N(0, (tau Q(rho))^-1) through a sparse Cholesky factor."""
    q = tau * leroux_matrix(w.w, rho)
    return SymbolicCholesky(q).factor_matrix(q).sample(rng)


def simulate_with_truth(sc: SimulationScenario) -> tuple[ArealDataset, SimulationTruth]:
    sc.validate()
    s_coords, s_feat, s_phi, s_noise = np.random.SeedSequence(sc.seed).spawn(4)
    coords = _layout(sc, np.random.default_rng(s_coords))
    x = np.random.default_rng(s_feat).standard_normal((sc.n_units, sc.n_features))
    if sc.mean_function == "linear":
        f = sc.intercept + x @ np.asarray(sc.coefficients, dtype=float)
    else:
        f = sc.intercept + nonlinear_mean(x)
    if sc.include_spatial:
        w = knn_adjacency(coords, sc.d_param)
        phi = sample_leroux(w, sc.rho_true, sc.tau_true, np.random.default_rng(s_phi))
    else:
        phi = np.zeros(sc.n_units)
    eps = np.random.default_rng(s_noise).normal(0.0, math.sqrt(sc.sigma2_true), sc.n_units)
    width = len(str(sc.n_units - 1))
    ds = ArealDataset(
        ids=tuple(f"U{k:0{width}d}" for k in range(sc.n_units)),
        coords=coords,
        features=x,
        target=f + phi + eps,
        feature_names=tuple(f"x{j + 1}" for j in range(sc.n_features)),
        target_scale="log",
    )
    return ds, SimulationTruth(phi=phi, mean=f, scenario=sc)


def simulate(sc: SimulationScenario) -> ArealDataset:
    """Synthetic areal dataset with known mean function and CAR random effects.

    Targets are generated on the modelling (log) scale.
    """
    return simulate_with_truth(sc)[0]


def dumps_json(obj) -> str:
    """Deterministic JSON used for every artifact."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
