"""Regression random forest with out-of-bag bookkeeping.

Trees are CART regression trees grown on bootstrap samples.  Each split
looks at a fresh random subset of ``m_try`` features and picks the
threshold minimising the summed child squared error; candidate thresholds
are midpoints between consecutive distinct values.  A split is refused if
either child would hold fewer than ``min_node`` rows or if it does not
reduce the squared error.

Every tree draws its randomness from its own generator seeded with
``(seed, tree_index)``, so a forest is bit-identical whatever the thread
count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from ._parallel import parallel_map

FORMAT = "carforest.forest/1"


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    m_try: int | None = None  # None: all features (bagging)
    min_node: int = 5
    seed: int = 0

    def resolved_m_try(self, p: int) -> int:
        m = p if self.m_try is None else int(self.m_try)
        if not 1 <= m <= p:
            raise ForestError(f"m_try={m} must lie in [1, {p}]")
        return m

    def validate(self, p: int) -> None:
        if self.n_trees < 1:
            raise ForestError("n_trees must be at least 1")
        if self.min_node < 1:
            raise ForestError("min_node must be at least 1")
        self.resolved_m_try(p)

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "m_try": self.m_try, "min_node": self.min_node, "seed": self.seed}


@nb.njit(nogil=True, cache=True)
def _grow_tree(x, y, sample, keys, m_try, min_node):
    n = sample.size
    p = x.shape[1]
    cap = 2 * n
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int32)

    idx = sample.copy()
    buf = np.empty(n, np.int64)
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    top = 1
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    n_nodes = 1
    all_features = np.arange(p)
    xs = np.empty(n)
    ys = np.empty(n)

    while top > 0:
        top -= 1
        node = st_node[top]
        s = st_start[top]
        e = st_end[top]
        cnt = e - s
        mean = 0.0
        for i in range(s, e):
            mean += y[idx[i]]
        mean /= cnt
        value[node] = mean
        count[node] = cnt
        if cnt < 2 * min_node:
            continue
        total = 0.0
        tot_s = 0.0
        for i in range(s, e):
            d = y[idx[i]] - mean
            tot_s += d
            total += d * d
        if total <= 0.0:
            continue

        if m_try < p:
            cand = np.sort(np.argsort(keys[node])[:m_try])
        else:
            cand = all_features
        tol = 1e-12 * total
        best_sse = total
        best_f = -1
        best_thr = 0.0
        for f in cand:
            for i in range(cnt):
                xs[i] = x[idx[s + i], f]
            order = np.argsort(xs[:cnt], kind="mergesort")
            for i in range(cnt):
                ys[i] = y[idx[s + order[i]]] - mean
            sum_l = 0.0
            sq_l = 0.0
            for i in range(cnt - 1):
                yi = ys[i]
                sum_l += yi
                sq_l += yi * yi
                nl = i + 1
                nr = cnt - nl
                if nl < min_node:
                    continue
                if nr < min_node:
                    break
                a = xs[order[i]]
                b = xs[order[i + 1]]
                if a == b:
                    continue
                sum_r = tot_s - sum_l
                sse = (sq_l - sum_l * sum_l / nl) + ((total - sq_l) - sum_r * sum_r / nr)
                if sse < best_sse - tol:
                    best_sse = sse
                    best_f = f
                    thr = a + 0.5 * (b - a)
                    if not thr < b:
                        thr = a
                    best_thr = thr
        if best_f < 0:
            continue

        nl = 0
        for i in range(s, e):
            if x[idx[i], best_f] <= best_thr:
                buf[nl] = idx[i]
                nl += 1
        k = nl
        for i in range(s, e):
            if x[idx[i], best_f] > best_thr:
                buf[k] = idx[i]
                k += 1
        for i in range(cnt):
            idx[s + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # right pushed first so the left subtree is grown first
        st_node[top] = n_nodes + 1
        st_start[top] = s + nl
        st_end[top] = e
        top += 1
        st_node[top] = n_nodes
        st_start[top] = s
        st_end[top] = s + nl
        top += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


@nb.njit(nogil=True, cache=True)
def _predict_trees(x, feature, threshold, left, right, value, offsets):
    n_trees = offsets.size - 1
    out = np.empty((n_trees, x.shape[0]))
    for t in range(n_trees):
        base = offsets[t]
        for r in range(x.shape[0]):
            node = 0
            while feature[base + node] >= 0:
                if x[r, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[t, r] = value[base + node]
    return out


@dataclass(frozen=True)
class RegressionTree:
    """Flattened tree.  ``feature == -1`` marks a leaf; child links are
    node indices within the same tree."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    bootstrap: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        return _predict_trees(
            x, self.feature, self.threshold, self.left, self.right, self.value, np.array([0, self.n_nodes])
        )[0]


def _tree_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, t])


def _fit_one(args):
    x, z, t, seed, m_try, min_node = args
    n, p = x.shape
    rng = _tree_rng(seed, t)
    sample = np.sort(rng.integers(0, n, n))
    keys = rng.random((2 * n, p)) if m_try < p else np.empty((0, p))
    arrays = _grow_tree(x, z, sample, keys, m_try, min_node)
    return arrays, sample


@dataclass
class Forest:
    config: ForestConfig
    n_features: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    offsets: np.ndarray
    inbag: np.ndarray  # (n_trees, n_train) bootstrap multiplicities
    oob_pred: np.ndarray
    oob_errors: np.ndarray
    oob_fallback: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    @property
    def trees(self) -> list[RegressionTree]:
        out = []
        for t in range(self.n_trees):
            a, b = self.offsets[t], self.offsets[t + 1]
            boot = np.repeat(np.arange(self.inbag.shape[1]), self.inbag[t])
            out.append(
                RegressionTree(
                    self.feature[a:b],
                    self.threshold[a:b],
                    self.left[a:b],
                    self.right[a:b],
                    self.value[a:b],
                    self.n_samples[a:b],
                    boot,
                )
            )
        return out

    @property
    def oob_membership(self) -> list[np.ndarray]:
        """For each training unit, the indices of trees that did not use it."""
        return [np.flatnonzero(self.inbag[:, k] == 0) for k in range(self.inbag.shape[1])]

    def split_candidates(self, tree: int, node: int) -> np.ndarray:
        """Features the split search considered at ``node`` of ``tree``.

        Replays the tree's generator: the bootstrap draw comes first, then
        one row of uniform keys per potential node; the ``m_try`` smallest
        keys pick the candidates.
        """
        n = self.inbag.shape[1]
        p = self.n_features
        m_try = self.config.resolved_m_try(p)
        if m_try == p:
            return np.arange(p)
        rng = _tree_rng(self.config.seed, tree)
        rng.integers(0, n, n)
        keys = rng.random((2 * n, p))
        return np.sort(np.argsort(keys[node])[:m_try])

    def predict_trees(self, x_new) -> np.ndarray:
        x_new = np.ascontiguousarray(x_new, dtype=float)
        if x_new.ndim != 2 or x_new.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} feature columns")
        return _predict_trees(
            x_new, self.feature, self.threshold, self.left, self.right, self.value, self.offsets
        )

    def predict(self, x_new) -> np.ndarray:
        return self.predict_trees(x_new).mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "config": self.config.to_dict(),
            "n_features": self.n_features,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "offsets": self.offsets.tolist(),
            "inbag": self.inbag.tolist(),
            "oob_pred": self.oob_pred.tolist(),
            "oob_errors": self.oob_errors.tolist(),
            "oob_fallback": self.oob_fallback.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format") != FORMAT:
            raise ForestError(f"unsupported forest format {d.get('format')!r}")
        return cls(
            config=ForestConfig(**d["config"]),
            n_features=d["n_features"],
            feature=np.array(d["feature"], dtype=np.int32),
            threshold=np.array(d["threshold"], dtype=float),
            left=np.array(d["left"], dtype=np.int32),
            right=np.array(d["right"], dtype=np.int32),
            value=np.array(d["value"], dtype=float),
            n_samples=np.array(d["n_samples"], dtype=np.int32),
            offsets=np.array(d["offsets"], dtype=np.int64),
            inbag=np.array(d["inbag"], dtype=np.int32),
            oob_pred=np.array(d["oob_pred"], dtype=float),
            oob_errors=np.array(d["oob_errors"], dtype=float),
            oob_fallback=np.array(d["oob_fallback"], dtype=np.int64),
        )


def fit_forest(x, z, cfg: ForestConfig = ForestConfig(), *, row_keys=None, n_jobs: int | None = None) -> Forest:
    """Grow ``cfg.n_trees`` trees on bootstrap samples of ``(x, z)``.

    With ``row_keys`` (one stable key per row, e.g. unit ids) the rows are
    put in key order before any sampling, making the fitted trees invariant
    to how the caller ordered the rows.  OOB quantities are always reported
    in the caller's row order.
    """
    x = np.ascontiguousarray(x, dtype=float)
    z = np.ascontiguousarray(z, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] == 0:
        raise ForestError("empty feature matrix")
    n, p = x.shape
    if len(z) != n:
        raise ForestError("x and z have different numbers of rows")
    if n < 2:
        raise ForestError("need at least two training rows")
    cfg.validate(p)
    m_try = cfg.resolved_m_try(p)

    if row_keys is not None:
        perm = np.argsort(np.asarray(row_keys), kind="stable")
        x_fit, z_fit = np.ascontiguousarray(x[perm]), z[perm]
    else:
        perm = None
        x_fit, z_fit = x, z

    jobs = [(x_fit, z_fit, t, cfg.seed, m_try, cfg.min_node) for t in range(cfg.n_trees)]
    results = parallel_map(_fit_one, jobs, n_jobs)

    sizes = np.array([len(r[0][0]) for r in results], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    feature, threshold, left, right, value, count = (
        np.concatenate([r[0][i] for r in results]) for i in range(6)
    )
    inbag = np.zeros((cfg.n_trees, n), dtype=np.int32)
    for t, (_, sample) in enumerate(results):
        inbag[t] = np.bincount(sample, minlength=n)

    forest = Forest(
        config=cfg,
        n_features=p,
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        value=value,
        n_samples=count,
        offsets=offsets,
        inbag=inbag,
        oob_pred=np.empty(0),
        oob_errors=np.empty(0),
    )
    preds = forest.predict_trees(x_fit)
    oob = inbag == 0
    n_oob = oob.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        oob_pred = np.where(oob, preds, 0.0).sum(axis=0) / n_oob
    fallback = np.flatnonzero(n_oob == 0)
    if fallback.size:
        warnings.warn(
            f"{fallback.size} training rows were in every bootstrap sample; "
            "using full-forest predictions for them",
            stacklevel=2,
        )
        oob_pred[fallback] = preds[:, fallback].mean(axis=0)
    errors = (z_fit - oob_pred)[n_oob > 0]

    if perm is not None:
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        forest.inbag = inbag[:, inv]
        oob_pred = oob_pred[inv]
        fallback = np.sort(perm[fallback])
        errors = (z - oob_pred)[(forest.inbag == 0).sum(axis=0) > 0]
    forest.oob_pred = oob_pred
    forest.oob_errors = errors
    forest.oob_fallback = fallback
    return forest


def predict_forest(f: Forest, x_new) -> np.ndarray:
    """Arithmetic mean of the tree predictions."""
    return f.predict(x_new)


def oob_predict(f: Forest) -> np.ndarray:
    """Out-of-bag prediction for every training row (caller's row order)."""
    return f.oob_pred.copy()


def interval_oob(f: Forest, point, level: float = 0.95):
    """Prediction interval from empirical quantiles of the OOB errors."""
    if len(f.oob_errors) < 40:
        raise ForestError(f"need at least 40 OOB errors, have {len(f.oob_errors)}")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(f.oob_errors, [alpha, 1.0 - alpha])
    point = np.asarray(point, dtype=float)
    return point + lo, point + hi


def oob_variance(f: Forest) -> float:
    """Unbiased sample variance of the OOB errors."""
    if len(f.oob_errors) < 2:
        raise ForestError("need at least two OOB errors")
    return float(np.var(f.oob_errors, ddof=1))
