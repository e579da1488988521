"""Gaussian Leroux CAR model with exact latent-field integration.

The model on the training units is

    y_k = b0 [+ x_k' b] + offset_k + phi_k + eps_k,   eps_k ~ N(0, sigma2)

with ``phi ~ N(0, (tau Q(rho))^-1)`` over a joint graph that also holds the
prediction units (which carry no likelihood term), and
``b0, b ~ N(0, 1e5)``.  Because everything is Gaussian, the latent vector
``(b0, b, phi)`` integrates out in closed form; the three hyperparameters
are fitted by maximising their log marginal posterior on the internal
scale ``(logit rho, ln tau, ln 1/sigma2)`` with the default priors
N(0, 100) and log-gamma(1, 0.01).

All sparse work happens on the ``phi`` block, whose precision keeps the
graph's sparsity; the few fixed effects are handled through a dense Schur
complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logit

from .cholesky import NotPositiveDefinite, SymbolicCholesky
from .graph import NeighbourhoodMatrix, knn_adjacency, laplacian
from .linear import Z975
from .prediction import PredictionSet

LOG_2PI = math.log(2.0 * math.pi)
PARAM_NAMES = ("logit_rho", "log_tau", "log_kappa")
_BOX = np.array([[-15.0, 15.0], [-25.0, 25.0], [-25.0, 25.0]])


class CarFitError(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class CarPriors:
    beta_variance: float = 100000.0
    logit_rho_mean: float = 0.0
    logit_rho_variance: float = 100.0
    precision_shape: float = 1.0
    precision_rate: float = 0.01

    def log_density(self, h: np.ndarray) -> float:
        a, t, k = h
        lp = -0.5 * (a - self.logit_rho_mean) ** 2 / self.logit_rho_variance
        lp -= 0.5 * math.log(2.0 * math.pi * self.logit_rho_variance)
        for v in (t, k):
            lp += (
                self.precision_shape * math.log(self.precision_rate)
                - gammaln(self.precision_shape)
                + self.precision_shape * v
                - self.precision_rate * math.exp(v)
            )
        return lp

    def gradient(self, h: np.ndarray) -> np.ndarray:
        a, t, k = h
        return np.array(
            [
                -(a - self.logit_rho_mean) / self.logit_rho_variance,
                self.precision_shape - self.precision_rate * math.exp(t),
                self.precision_shape - self.precision_rate * math.exp(k),
            ]
        )


@dataclass(frozen=True)
class Hyper:
    rho: float
    tau: float
    sigma2: float

    @classmethod
    def from_internal(cls, h) -> "Hyper":
        return cls(rho=float(expit(h[0])), tau=float(math.exp(h[1])), sigma2=float(math.exp(-h[2])))

    def internal(self) -> np.ndarray:
        return np.array([logit(self.rho), math.log(self.tau), -math.log(self.sigma2)])


class _Posterior:
    """Latent Gaussian posterior at one hyperparameter value."""

    def __init__(self, problem: "CarProblem", h: np.ndarray):
        self.problem = problem
        self.h = np.asarray(h, dtype=float)
        self._pinv_diag = None
        rho = expit(h[0])
        tau = math.exp(h[1])
        kappa = math.exp(h[2])
        self.rho, self.tau, self.kappa = rho, tau, kappa
        pr = problem
        q_data = rho * pr.lap_data + (1.0 - rho) * pr.eye_data
        try:
            self.logdet_q = pr.symbolic.factor(q_data).logdet
            self.lu = pr.symbolic.factor(tau * q_data + kappa * pr.obs_data)
        except NotPositiveDefinite as exc:
            raise CarFitError(str(exc)) from None
        logdet_pphi = self.lu.logdet
        lam = 1.0 / pr.priors.beta_variance
        b = pr.n_fixed
        # Schur complement of the phi block
        self.v = self.lu.solve(pr.fs)  # P_phiphi^-1 F_s  (N x b)
        p_bb = lam * np.eye(b) + kappa * pr.ftf
        schur = p_bb - kappa**2 * (pr.fs.T @ self.v)
        self.schur_chol = scipy.linalg.cho_factor(schur, lower=True)
        logdet_schur = 2.0 * np.sum(np.log(np.diag(self.schur_chol[0])))
        self.logdet_p = logdet_pphi + logdet_schur

        r = pr.resid
        rhs_b = kappa * (pr.f_obs.T @ r)
        rhs_phi = np.zeros(pr.n_joint)
        rhs_phi[pr.obs_index] = kappa * r
        self.mean_beta, self.mean_phi = self.solve(rhs_b, rhs_phi)
        fit = pr.f_obs @ self.mean_beta + self.mean_phi[pr.obs_index]
        rss = float(np.sum((r - fit) ** 2))
        quad = kappa * rss + lam * float(self.mean_beta @ self.mean_beta)
        mp = self.mean_phi
        quad += tau * (rho * float(mp @ (pr.lap @ mp)) + (1.0 - rho) * float(mp @ mp))
        self.rss = rss
        n = len(r)
        self.log_marginal = 0.5 * (
            b * math.log(lam) + pr.n_joint * math.log(tau) + self.logdet_q
        ) - 0.5 * self.logdet_p + 0.5 * n * (math.log(kappa) - LOG_2PI) - 0.5 * quad
        self.log_posterior = self.log_marginal + pr.priors.log_density(self.h)

    def solve(self, rhs_b, rhs_phi):
        """Apply the inverse posterior precision to a (beta, phi) block vector."""
        kappa = self.kappa
        u = self.lu.solve(np.asarray(rhs_phi, dtype=float))
        xb = scipy.linalg.cho_solve(self.schur_chol, rhs_b - kappa * (self.problem.fs.T @ u))
        xphi = u - kappa * (self.v @ xb)
        return xb, xphi

    def phi_inverse_diagonal(self) -> np.ndarray:
        """diag(P_phiphi^-1), cached."""
        if self._pinv_diag is None:
            self._pinv_diag = self.lu.inverse_diagonal()
        return self._pinv_diag

    def linear_predictor_moments(self, joint_index):
        """Mean and variance of ``F_j beta + phi_j`` for joint units ``j``.

        With ``S`` the Schur complement and ``V = P_phiphi^-1 F_s``, the
        variance is ``diag(P_phiphi^-1)_j + g_j' S^-1 g_j`` where
        ``g_j = F_j - kappa V_j``.
        """
        pr = self.problem
        joint_index = np.asarray(joint_index, dtype=np.int64)
        f = pr.f_joint[joint_index]  # (m, b)
        mean = f @ self.mean_beta + self.mean_phi[joint_index]
        if len(joint_index) == 0:
            return mean, np.zeros(0)
        g = f - self.kappa * self.v[joint_index]
        sg = scipy.linalg.cho_solve(self.schur_chol, g.T)
        var = self.phi_inverse_diagonal()[joint_index] + np.einsum("ij,ji->i", g, sg)
        return mean, var


class CarProblem:
    """Data and structure shared by every hyperparameter evaluation."""

    def __init__(
        self,
        y_obs,
        obs_index,
        w_joint: NeighbourhoodMatrix,
        offset=None,
        x_joint=None,
        features_in_mean: bool = True,
        priors: CarPriors = CarPriors(),
        symbolic: SymbolicCholesky | None = None,
    ):
        self.w_joint = w_joint
        self.n_joint = w_joint.n
        self.obs_index = np.asarray(obs_index, dtype=np.int64)
        self.y_obs = np.asarray(y_obs, dtype=float)
        if len(self.y_obs) != len(self.obs_index):
            raise ValueError("one observation per observed index required")
        self.offset = np.zeros(self.n_joint) if offset is None else np.asarray(offset, dtype=float).copy()
        if len(self.offset) != self.n_joint:
            raise ValueError(f"offset must have length {self.n_joint}")
        self.features_in_mean = features_in_mean
        cols = [np.ones(self.n_joint)]
        if features_in_mean:
            if x_joint is None:
                raise ValueError("features_in_mean needs x_joint")
            x_joint = np.asarray(x_joint, dtype=float).reshape(self.n_joint, -1)
            cols += list(x_joint.T)
        self.f_joint = np.column_stack(cols)
        self.n_fixed = self.f_joint.shape[1]
        self.priors = priors
        self.f_obs = self.f_joint[self.obs_index]
        self.ftf = self.f_obs.T @ self.f_obs
        self.fs = np.zeros((self.n_joint, self.n_fixed))
        self.fs[self.obs_index] = self.f_obs
        ind = np.zeros(self.n_joint)
        ind[self.obs_index] = 1.0
        self.obs_diag = sp.diags(ind).tocsc()
        self.eye = sp.identity(self.n_joint, format="csc")
        self.lap = laplacian(w_joint.w)
        self.symbolic = symbolic or SymbolicCholesky(self.lap + self.eye)
        self.lap_data = self.symbolic.align(self.lap)
        self.eye_data = self.symbolic.align(self.eye)
        self.obs_data = self.symbolic.align(self.obs_diag)
        self.resid = self.y_obs - self.offset[self.obs_index]

    def posterior(self, h) -> _Posterior:
        return _Posterior(self, np.asarray(h, dtype=float))

    def log_posterior(self, h) -> float:
        return self.posterior(h).log_posterior

    def gradient(self, h) -> np.ndarray:
        """Exact gradient of the log marginal posterior (dense algebra).

        Uses the envelope identity: the latent mode's dependence on the
        hyperparameters drops out, leaving trace and quadratic terms.
        """
        h = np.asarray(h, dtype=float)
        post = self.posterior(h)
        rho, tau, kappa = post.rho, post.tau, post.kappa
        b, N = self.n_fixed, self.n_joint
        lam = 1.0 / self.priors.beta_variance
        q = (rho * self.lap + (1.0 - rho) * self.eye).toarray()
        a_mat = np.zeros((len(self.obs_index), b + N))
        a_mat[:, :b] = self.f_obs
        a_mat[np.arange(len(self.obs_index)), b + self.obs_index] = 1.0
        p = np.zeros((b + N, b + N))
        p[:b, :b] = lam * np.eye(b)
        p[b:, b:] = tau * q
        p += kappa * a_mat.T @ a_mat
        p_inv = np.linalg.inv(p)
        p_phi = p_inv[b:, b:]
        m_rho = self.lap.toarray() - np.eye(N)
        mu_phi = post.mean_phi
        g_t = 0.5 * N - 0.5 * tau * np.sum(p_phi * q) - 0.5 * tau * mu_phi @ q @ mu_phi
        g_k = 0.5 * len(self.obs_index) - 0.5 * kappa * np.sum(p_inv * (a_mat.T @ a_mat)) - 0.5 * kappa * post.rss
        q_inv = np.linalg.inv(q)
        g_rho = 0.5 * np.sum(q_inv * m_rho) - 0.5 * tau * np.sum(p_phi * m_rho) - 0.5 * tau * mu_phi @ m_rho @ mu_phi
        g_a = rho * (1.0 - rho) * g_rho
        return np.array([g_a, g_t, g_k]) + self.priors.gradient(h)

    def starting_points(self) -> list[np.ndarray]:
        r = self.resid - np.mean(self.resid)
        v = max(float(np.var(r)), 1e-8)
        pts = []
        for a, s in ((0.0, 0.5), (2.5, 0.7), (-2.5, 0.3), (5.0, 0.5)):
            pts.append(np.array([a, -math.log(s * v), -math.log((1.0 - s) * v)]))
        return pts


@dataclass
class CarFit:
    """Fitted Leroux CAR model over a joint (training + prediction) graph."""

    ids: tuple[str, ...]
    n_train: int
    hyper: Hyper
    h_mode: np.ndarray
    log_posterior: float
    n_evaluations: int
    iterations: int
    offset: np.ndarray
    features_in_mean: bool
    fixed_names: tuple[str, ...]
    mean_beta: np.ndarray
    mean_phi: np.ndarray
    problem: CarProblem = field(repr=False)
    posterior: _Posterior = field(repr=False)
    grid: list = field(default_factory=list, repr=False)  # (h, weight, _Posterior)
    trace: list = field(default_factory=list, repr=False)

    @property
    def w_joint(self) -> NeighbourhoodMatrix:
        return self.problem.w_joint

    @property
    def train_indices(self) -> np.ndarray:
        return self.problem.obs_index

    @property
    def beta0(self) -> float:
        return float(self.mean_beta[0])

    @property
    def beta(self) -> np.ndarray:
        return self.mean_beta[1:]

    def latent_marginal_variances(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior variances of (beta, phi) at the plug-in mode."""
        post = self.posterior
        b = self.problem.n_fixed
        s_inv = scipy.linalg.cho_solve(post.schur_chol, np.eye(b))
        kv = post.kappa * post.v
        var_phi = post.phi_inverse_diagonal() + np.einsum("ij,jk,ik->i", kv, s_inv, kv)
        return np.diag(s_inv).copy(), var_phi

    def to_dict(self) -> dict:
        d = {
            "hyper": {"rho": self.hyper.rho, "tau": self.hyper.tau, "sigma2": self.hyper.sigma2},
            "internal_mode": dict(zip(PARAM_NAMES, self.h_mode.tolist())),
            "fixed_effects": dict(zip(self.fixed_names, self.mean_beta.tolist())),
            "phi_mean": self.mean_phi.tolist(),
            "ids": list(self.ids),
            "n_train": self.n_train,
            "features_in_mean": self.features_in_mean,
            "offset": self.offset.tolist(),
            "diagnostics": {
                "log_marginal_posterior": self.log_posterior,
                "optimizer_iterations": self.iterations,
                "function_evaluations": self.n_evaluations,
                "grid_points": len(self.grid),
            },
        }
        return d


def _box_penalty(h: np.ndarray) -> float:
    excess = np.maximum(_BOX[:, 0] - h, 0.0) + np.maximum(h - _BOX[:, 1], 0.0)
    return float(np.sum(excess))


def optimise_hyper(
    problem: CarProblem,
    fixed: dict | None = None,
    starts: list | None = None,
    method: str = "nelder-mead",
):
    """Maximise the log marginal posterior over the free hyperparameters.

    ``fixed`` maps any of ``rho``, ``tau``, ``sigma2`` to a held value.
    Each start gets a short Nelder-Mead run; the best is then polished to a
    tight tolerance.  Returns ``(h, log_posterior, n_evals, n_iter, trace)``.
    """
    fixed = fixed or {}
    h_fixed = np.full(3, np.nan)
    if "rho" in fixed:
        h_fixed[0] = logit(fixed["rho"])
    if "tau" in fixed:
        h_fixed[1] = math.log(fixed["tau"])
    if "sigma2" in fixed:
        h_fixed[2] = -math.log(fixed["sigma2"])
    free = np.isnan(h_fixed)
    starts = starts if starts is not None else problem.starting_points()
    trace: list = []
    n_evals = 0

    def full(u):
        h = h_fixed.copy()
        h[free] = u
        return h

    def objective(u):
        nonlocal n_evals
        n_evals += 1
        h = full(u)
        pen = _box_penalty(h)
        try:
            val = -problem.log_posterior(np.clip(h, _BOX[:, 0], _BOX[:, 1]))
        except CarFitError:
            return 1e300
        return val + 1e6 * pen

    if not free.any():
        h = h_fixed
        lp = problem.log_posterior(h)
        return h, lp, 1, 0, [(h.tolist(), lp)]

    def simplex(u0, step):
        pts = [u0]
        for j in range(len(u0)):
            e = u0.copy()
            e[j] += step
            pts.append(e)
        return np.array(pts)

    if method == "bfgs":
        def neg_grad(u):
            g = problem.gradient(full(u))
            return -g[free]

        best = None
        for s in starts:
            res = minimize(objective, s[free], jac=neg_grad, method="L-BFGS-B",
                           bounds=[tuple(b) for b in _BOX[free]])
            trace.append((full(res.x).tolist(), -float(res.fun)))
            if best is None or res.fun < best.fun:
                best = res
        if not best.success:
            raise CarFitError(f"hyperparameter optimisation failed: {best.message}", trace)
        return full(best.x), -float(best.fun), n_evals, int(best.nit), trace

    runs = []
    for s in starts:
        u0 = np.asarray(s, dtype=float)[free]
        res = minimize(
            objective,
            u0,
            method="Nelder-Mead",
            options={"initial_simplex": simplex(u0, 1.0), "xatol": 1e-2, "fatol": 1e-4, "maxiter": 80 * free.sum()},
        )
        trace.append((full(res.x).tolist(), -float(res.fun)))
        runs.append(res)
    best = min(runs, key=lambda r: r.fun)
    res = minimize(
        objective,
        best.x,
        method="Nelder-Mead",
        options={"initial_simplex": simplex(best.x, 0.2), "xatol": 1e-5, "fatol": 1e-8, "maxiter": 2000 * free.sum()},
    )
    trace.append((full(res.x).tolist(), -float(res.fun)))
    if not res.success or not np.isfinite(res.fun) or res.fun >= 1e299:
        raise CarFitError(f"hyperparameter optimisation did not converge: {res.message}", trace)
    n_iter = int(sum(r.nit for r in runs) + res.nit)
    return full(res.x), -float(res.fun), n_evals, n_iter, trace


def _hessian(fn, h: np.ndarray, free: np.ndarray, step: float = 1e-2) -> np.ndarray:
    idx = np.flatnonzero(free)
    k = len(idx)
    hess = np.zeros((k, k))
    f0 = fn(h)
    for a in range(k):
        for b in range(a, k):
            if a == b:
                e = np.zeros(3)
                e[idx[a]] = step
                hess[a, a] = (fn(h + e) - 2 * f0 + fn(h - e)) / step**2
            else:
                ea = np.zeros(3)
                eb = np.zeros(3)
                ea[idx[a]] = step
                eb[idx[b]] = step
                hess[a, b] = hess[b, a] = (
                    fn(h + ea + eb) - fn(h + ea - eb) - fn(h - ea + eb) + fn(h - ea - eb)
                ) / (4 * step**2)
    return hess


def build_grid(problem: CarProblem, h_mode: np.ndarray, free: np.ndarray, points: int = 8, span: float = 3.0,
               min_weight: float = 1e-3):
    """Weighted hyperparameter grid on the principal axes of the mode's
    curvature.  Points with relative weight below ``min_weight`` are dropped.
    """
    k = int(free.sum())
    if k == 0:
        post = problem.posterior(h_mode)
        return [(h_mode, 1.0, post)]
    hess = _hessian(problem.log_posterior, h_mode, free)
    evals, evecs = np.linalg.eigh(-hess)
    evals = np.maximum(evals, 1.0 / 25.0)  # sd capped at 5 on the internal scale
    scale = evecs / np.sqrt(evals)
    zs = np.linspace(-span, span, points)
    mesh = np.stack(np.meshgrid(*([zs] * k), indexing="ij"), axis=-1).reshape(-1, k)
    cand = []
    for z in mesh:
        h = h_mode.copy()
        h[free] = h_mode[free] + scale @ z
        h = np.clip(h, _BOX[:, 0], _BOX[:, 1])
        try:
            post = problem.posterior(h)
        except CarFitError:
            continue
        cand.append((h, post.log_posterior, post))
    top = max(c[1] for c in cand)
    kept = [(h, math.exp(lp - top), post) for h, lp, post in cand if lp - top > math.log(min_weight)]
    total = sum(w for _, w, _ in kept)
    return [(h, w / total, post) for h, w, post in kept]


def fit_car_arrays(
    y_obs,
    obs_index,
    w_joint: NeighbourhoodMatrix,
    *,
    ids=None,
    offset=None,
    x_joint=None,
    features_in_mean: bool = True,
    priors: CarPriors = CarPriors(),
    fixed: dict | None = None,
    starts=None,
    method: str = "nelder-mead",
    grid: bool = False,
    feature_names=None,
    symbolic: SymbolicCholesky | None = None,
) -> CarFit:
    problem = CarProblem(y_obs, obs_index, w_joint, offset, x_joint, features_in_mean, priors, symbolic)
    h, lp, n_evals, n_iter, trace = optimise_hyper(problem, fixed, starts, method)
    post = problem.posterior(h)
    free = np.ones(3, dtype=bool)
    for j, name in enumerate(("rho", "tau", "sigma2")):
        if fixed and name in fixed:
            free[j] = False
    names = ["(intercept)"]
    if features_in_mean:
        names += list(feature_names) if feature_names is not None else [f"x{j + 1}" for j in range(problem.n_fixed - 1)]
    fit = CarFit(
        ids=tuple(ids) if ids is not None else tuple(str(k) for k in range(w_joint.n)),
        n_train=len(problem.obs_index),
        hyper=Hyper.from_internal(h),
        h_mode=h,
        log_posterior=post.log_posterior,
        n_evaluations=n_evals,
        iterations=n_iter,
        offset=problem.offset,
        features_in_mean=features_in_mean,
        fixed_names=tuple(names),
        mean_beta=post.mean_beta,
        mean_phi=post.mean_phi,
        problem=problem,
        posterior=post,
        trace=trace,
    )
    if grid:
        fit.grid = build_grid(problem, h, free)
    return fit


def fit_car(
    train,
    test=None,
    *,
    offset=None,
    w_joint: NeighbourhoodMatrix | None = None,
    d: int = 5,
    priors: CarPriors = CarPriors(),
    features_in_mean: bool = True,
    **kwargs,
) -> CarFit:
    """Fit the CAR model to ``train``; ``test`` units join the graph unobserved.

    The joint ordering is training units first, then test units.  ``offset``
    (length = joint size) is a fixed per-unit term in the mean.
    """
    joint = train if test is None else train.concat(test)
    if not np.all(train.observed):
        raise ValueError("every training unit needs an observed target")
    if w_joint is None:
        w_joint = knn_adjacency(joint.coords, d)
    return fit_car_arrays(
        train.target,
        np.arange(train.n_total),
        w_joint,
        ids=joint.ids,
        offset=offset,
        x_joint=joint.features if features_in_mean else None,
        features_in_mean=features_in_mean,
        priors=priors,
        feature_names=joint.feature_names,
        **kwargs,
    )


def predict_car(fit: CarFit, test_indices=None, *, mode: str = "plugin", n_draws: int = 1000, seed: int = 0) -> PredictionSet:
    """Posterior predictive point and 95% interval for joint units.

    ``test_indices`` index the joint ordering (default: every non-training
    unit).  ``mode='plugin'`` uses Gaussian quantiles at the hyperparameter
    mode; ``mode='grid'`` mixes over the weighted grid and takes empirical
    quantiles of ``n_draws`` seeded draws.
    """
    n_joint = fit.problem.n_joint
    if test_indices is None:
        mask = np.ones(n_joint, dtype=bool)
        mask[fit.train_indices] = False
        test_indices = np.flatnonzero(mask)
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if test_indices.size and (test_indices.min() < 0 or test_indices.max() >= n_joint):
        raise KeyError("test index outside the fitted joint graph")
    ids = tuple(fit.ids[i] for i in test_indices)
    offset = fit.offset[test_indices]

    if mode == "plugin":
        mean, var = fit.posterior.linear_predictor_moments(test_indices)
        point = offset + mean
        pvar = var + fit.hyper.sigma2
        half = Z975 * np.sqrt(pvar)
        return PredictionSet(ids=ids, point=point, lower=point - half, upper=point + half, scale="log", variance=pvar)
    if mode != "grid":
        raise ValueError(f"unknown interval mode {mode!r}")
    if not fit.grid:
        free = np.ones(3, dtype=bool)
        fit.grid = build_grid(fit.problem, fit.h_mode, free)
    weights = np.array([w for _, w, _ in fit.grid])
    means, sds = [], []
    for h, _, post in fit.grid:
        m, v = post.linear_predictor_moments(test_indices)
        means.append(offset + m)
        sds.append(np.sqrt(v + math.exp(-h[2])))
    means = np.array(means)
    sds = np.array(sds)
    point = weights @ means
    pvar = weights @ (sds**2 + means**2) - point**2
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(weights), size=n_draws, p=weights)
    draws = means[comp] + sds[comp] * rng.standard_normal((n_draws, len(test_indices)))
    lower, upper = np.quantile(draws, [0.025, 0.975], axis=0)
    return PredictionSet(ids=ids, point=point, lower=lower, upper=upper, scale="log", variance=pvar)
