"""Normal linear model fitted by maximum likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .prediction import PredictionSet

Z975 = float(norm.ppf(0.975))


class LinearModelError(ValueError):
    pass


@dataclass(frozen=True)
class LmFit:
    beta0: float
    beta: np.ndarray
    sigma2: float
    cov: np.ndarray  # covariance of (beta0, beta)
    n_obs: int

    def to_dict(self) -> dict:
        return {
            "beta0": self.beta0,
            "beta": self.beta.tolist(),
            "sigma2": self.sigma2,
            "cov": self.cov.tolist(),
            "n_obs": self.n_obs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmFit":
        return cls(d["beta0"], np.array(d["beta"], dtype=float), d["sigma2"], np.array(d["cov"]), d["n_obs"])


def fit_lm_arrays(x, y, names=None) -> LmFit:
    """ML fit of ``y ~ N(b0 + x'b, s2)``; ``s2 = RSS / n``."""
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if n <= p + 1:
        raise LinearModelError(f"need more than p + 1 = {p + 1} observations, have {n}")
    design = np.column_stack([np.ones(n), x])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(design.shape) * np.finfo(float).eps
    if np.any(diag <= tol):
        names = list(names) if names is not None else [f"x{j + 1}" for j in range(p)]
        labels = ["(intercept)", *names]
        # columns that lie in the span of the others
        bad = []
        for j in range(design.shape[1]):
            others = np.delete(design, j, axis=1)
            coef, *_ = np.linalg.lstsq(others, design[:, j], rcond=None)
            if np.linalg.norm(others @ coef - design[:, j]) <= 1e-8 * max(1.0, np.linalg.norm(design[:, j])):
                bad.append(labels[j])
        raise LinearModelError(f"rank-deficient design; dependent columns: {', '.join(bad)}")
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - design @ coef
    sigma2 = float(resid @ resid / n)
    rinv = np.linalg.inv(r)
    cov = sigma2 * (rinv @ rinv.T)
    return LmFit(beta0=float(coef[0]), beta=coef[1:], sigma2=sigma2, cov=cov, n_obs=n)


def predict_lm_arrays(fit: LmFit, x, ids=None) -> PredictionSet:
    x = np.asarray(x, dtype=float)
    x = x.reshape(len(x), -1)
    if x.shape[1] != len(fit.beta):
        raise LinearModelError(f"expected {len(fit.beta)} features, got {x.shape[1]}")
    design = np.column_stack([np.ones(len(x)), x])
    point = design @ np.concatenate([[fit.beta0], fit.beta])
    var = fit.sigma2 + np.einsum("ij,jk,ik->i", design, fit.cov, design)
    half = Z975 * np.sqrt(var)
    ids = tuple(ids) if ids is not None else tuple(str(k) for k in range(len(x)))
    return PredictionSet(ids=ids, point=point, lower=point - half, upper=point + half, scale="log", variance=var)


def fit_lm(train) -> LmFit:
    obs = train.observed
    return fit_lm_arrays(train.features[obs], train.target[obs], names=train.feature_names)


def predict_lm(fit: LmFit, test) -> PredictionSet:
    """Point ``b0 + x'b`` with interval ``point +- z * sqrt(s2 + x' V x)``."""
    return predict_lm_arrays(fit, test.features, ids=test.ids)
