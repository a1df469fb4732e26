"""EM for incomplete multivariate-normal data and EM-with-bootstrapping imputation.

Conditional laws come from the sweep operator applied to the covariance
matrix.  EM runs on columns standardised by their observed moments and the
fitted parameters are mapped back to the original scale.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (ConditioningError, DataMatrix, PreconditionError, SeedSpec,
                   derive_stream)

log = logging.getLogger(__name__)

_PIVOT_RTOL = 1e-10
MAX_RESAMPLE_RETRIES = 10


@dataclass(frozen=True)
class EmOptions:
    tol: float = 1e-4
    max_iter: int = 1000
    ridge: float = 0.0
    standardize: bool = True
    debug: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be nonnegative, got {self.ridge}")


@dataclass(frozen=True, eq=False)
class MvnParams:
    mu: np.ndarray
    sigma: np.ndarray
    iters: int = 0
    converged: bool = True
    names: tuple[str, ...] = ()
    ridge_events: int = 0
    loglik_trace: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class ImputationSet:
    completed: list[DataMatrix]
    params_per_imputation: list[MvnParams]

    @property
    def m(self) -> int:
        return len(self.completed)


# ---------------------------------------------------------------------------
# sweep operator

def sweep(g: np.ndarray, k: int) -> np.ndarray:
    """Sweep symmetric matrix ``g`` on pivot ``k`` (returns a new array).

    After sweeping a set O of pivots, ``g[M, O]`` holds the regression
    coefficients ``S_MO S_OO^-1`` and ``g[M, M]`` the residual covariance.
    Sweeping the same pivot twice restores the matrix except that row and
    column ``k`` change sign (the diagonal entry is restored exactly).
    """
    g = np.array(g, dtype=float, copy=True)
    _sweep_inplace(g, k)
    return g


def _sweep_inplace(g: np.ndarray, k: int) -> None:
    h = g[k, k]
    row = g[k].copy()
    col = g[:, k].copy()
    g -= np.outer(col, row) / h
    g[k, :] = row / h
    g[:, k] = col / h
    g[k, k] = -1.0 / h


def _sweep_all(g: np.ndarray, pivots) -> bool:
    diag0 = np.diag(g).copy()
    for k in pivots:
        if not g[k, k] > _PIVOT_RTOL * max(diag0[k], np.finfo(float).tiny):
            return False
        _sweep_inplace(g, k)
    return True


def _regression(sigma: np.ndarray, obs: np.ndarray, mis: np.ndarray, ridge: float = 0.0):
    """Coefficients (mis x obs), residual covariance (mis x mis), repaired flag."""
    if obs.size == 0:
        return np.zeros((mis.size, 0)), sigma[np.ix_(mis, mis)].copy(), False
    order = np.concatenate([obs, mis])
    no = obs.size
    base = sigma[np.ix_(order, order)]
    g = base.copy()
    repaired = False
    if not _sweep_all(g, range(no)):
        repaired = True
        g = base.copy()
        d = np.diag(g)[:no]
        g[np.arange(no), np.arange(no)] += max(1e-8, ridge) * d.mean()
        if not _sweep_all(g, range(no)):
            raise ConditioningError(f"observed-block covariance singular for columns {obs.tolist()}")
        log.warning("ridge repair applied to observed block %s", obs.tolist())
    coef = g[no:, :no]
    cond = g[no:, no:]
    return coef, 0.5 * (cond + cond.T), repaired


def conditional_normal(params: MvnParams, observed_indices, observed_values):
    """Mean and covariance of the unobserved coordinates given the observed ones.

    ``observed_values`` may be one row (1-D) or many rows (2-D); the mean
    has the matching shape.  With no observed indices the marginal law of
    all coordinates is returned.
    """
    mu = np.asarray(params.mu, dtype=float)
    sigma = np.asarray(params.sigma, dtype=float)
    p = mu.size
    obs = np.asarray(observed_indices, dtype=int).reshape(-1)
    mis = np.setdiff1d(np.arange(p), obs)
    coef, cond, _ = _regression(sigma, obs, mis)
    x = np.asarray(observed_values, dtype=float)
    if obs.size == 0:
        return mu[mis].copy(), cond
    mean = mu[mis] + (x - mu[obs]) @ coef.T
    return mean, cond


# ---------------------------------------------------------------------------
# EM

@dataclass
class _Pattern:
    rows: np.ndarray
    obs: np.ndarray
    mis: np.ndarray


def _patterns(mask: np.ndarray) -> tuple[np.ndarray, list[_Pattern]]:
    """Rows that are complete, and groups of incomplete rows sharing a mask."""
    n, p = mask.shape
    codes = mask.astype(np.int64) @ (1 << np.arange(p, dtype=np.int64))
    full = (1 << p) - 1
    complete = np.flatnonzero(codes == full)
    groups = []
    uniq, inverse = np.unique(codes, return_inverse=True)
    for u_i, code in enumerate(uniq):
        if code == full:
            continue
        bits = (int(code) >> np.arange(p)) & 1
        groups.append(_Pattern(np.flatnonzero(inverse == u_i),
                               np.flatnonzero(bits == 1), np.flatnonzero(bits == 0)))
    return complete, groups


def observed_loglik(values: np.ndarray, mask: np.ndarray, mu, sigma) -> float:
    """Observed-data log-likelihood of an incomplete sample under N(mu, sigma)."""
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    total = 0.0
    complete, groups = _patterns(mask)
    blocks = [(complete, np.arange(mu.size))] + [(g.rows, g.obs) for g in groups]
    for rows, obs in blocks:
        if rows.size == 0 or obs.size == 0:
            continue
        s = sigma[np.ix_(obs, obs)]
        d = values[np.ix_(rows, obs)] - mu[obs]
        sign, logdet = np.linalg.slogdet(s)
        if sign <= 0:
            return -np.inf
        quad = np.einsum("ij,ij->", d, np.linalg.solve(s, d.T).T)
        total += -0.5 * (rows.size * (obs.size * np.log(2 * np.pi) + logdet) + quad)
    return float(total)


def _validate(values: np.ndarray, mask: np.ndarray, names) -> None:
    counts = mask.sum(axis=0)
    short = [names[j] for j in np.flatnonzero(counts < 2)]
    if short:
        raise PreconditionError(f"columns with fewer than 2 observed values: {short}")


def _initial(z: np.ndarray, complete: np.ndarray, groups, n: int, p: int):
    if complete.size >= p + 1:
        zc = z[complete]
        mu = zc.mean(axis=0)
        sigma = np.cov(zc, rowvar=False, bias=True).reshape(p, p)
        if np.linalg.eigvalsh(sigma)[0] > 1e-8 * max(np.trace(sigma) / p, 1e-300):
            return mu, sigma
    mu = np.nanmean(z, axis=0)
    return mu, np.diag(np.nanvar(z, axis=0))


def em_fit(data: DataMatrix, opts: EmOptions | None = None) -> MvnParams:
    """Maximum-likelihood (mu, Sigma) for incomplete multivariate-normal data.

    Rows with no observed cell carry no information and are skipped.
    Convergence is declared when the largest absolute change of any entry of
    mu or Sigma, on the standardised scale, falls below ``opts.tol``.
    Hitting ``max_iter`` returns ``converged=False`` rather than raising.
    """
    opts = opts or EmOptions()
    names = tuple(data.names)
    keep = data.mask.any(axis=1)
    x = data.values[keep]
    mask = data.mask[keep]
    n, p = x.shape
    _validate(x, mask, names)

    if opts.standardize:
        center = np.nanmean(x, axis=0)
        scale = np.nanstd(x, axis=0)
        flat = [names[j] for j in np.flatnonzero(~(scale > 0))]
        if flat:
            raise ConditioningError(f"zero observed variance in columns {flat}")
        z = (x - center) / scale
    else:
        center, scale = np.zeros(p), np.ones(p)
        for j in range(p):
            col = x[mask[:, j], j]
            if not np.ptp(col) > 0:
                raise ConditioningError(f"zero observed variance in columns {[names[j]]}")
        z = x

    complete, groups = _patterns(mask)
    zc = z[complete]
    t1_c = zc.sum(axis=0)
    t2_c = zc.T @ zc
    obs_blocks = [z[np.ix_(g.rows, g.obs)] for g in groups]

    mu, sigma = _initial(z, complete, groups, n, p)
    trace = []
    if opts.debug:
        trace.append(observed_loglik(z, mask, mu, sigma))
    ridge_events = 0
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        t1 = t1_c.copy()
        t2 = t2_c.copy()
        for g, zo in zip(groups, obs_blocks):
            coef, cond, repaired = _regression(sigma, g.obs, g.mis, opts.ridge)
            ridge_events += repaired
            zhat = np.empty((g.rows.size, p))
            zhat[:, g.obs] = zo
            zhat[:, g.mis] = mu[g.mis] + (zo - mu[g.obs]) @ coef.T
            t1 += zhat.sum(axis=0)
            t2 += zhat.T @ zhat
            t2[np.ix_(g.mis, g.mis)] += g.rows.size * cond
        mu_new = t1 / n
        sigma_new = t2 / n - np.outer(mu_new, mu_new)
        sigma_new = 0.5 * (sigma_new + sigma_new.T)
        delta = max(np.abs(mu_new - mu).max(), np.abs(sigma_new - sigma).max())
        mu, sigma = mu_new, sigma_new
        if opts.debug:
            ll = observed_loglik(z, mask, mu, sigma)
            if ll < trace[-1] - 1e-9 * max(1.0, abs(trace[-1])):
                raise AssertionError(
                    f"EM log-likelihood decreased at iteration {it}: {trace[-1]!r} -> {ll!r}")
            trace.append(ll)
        if delta < opts.tol:
            converged = True
            break
    if not converged:
        log.warning("EM did not converge in %d iterations", opts.max_iter)

    mu_out = center + scale * mu
    sigma_out = sigma * np.outer(scale, scale)
    return MvnParams(mu_out, sigma_out, it, converged, names, ridge_events, tuple(trace))


# ---------------------------------------------------------------------------
# EM with bootstrapping

def _matrix_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def _fit_bootstrap(data: DataMatrix, opts: EmOptions, rng: np.random.Generator,
                   j: int) -> MvnParams:
    n = data.n_rows
    errors = []
    for _ in range(MAX_RESAMPLE_RETRIES + 1):
        rows = rng.integers(0, n, size=n)
        resample = DataMatrix(data.names, data.values[rows], data.mask[rows])
        try:
            return em_fit(resample, opts)
        except (PreconditionError, ConditioningError) as exc:
            errors.append(str(exc))
    raise ConditioningError(
        f"imputation {j}: EM failed on {len(errors)} bootstrap resamples; last error: {errors[-1]}")


def emb_impute(data: DataMatrix, m: int, opts: EmOptions | None, seed: SeedSpec) -> ImputationSet:
    """Multiple imputation by EM on row-bootstrap resamples.

    Imputation ``j`` uses its own stream derived from ``seed`` with label
    ``("imputation", j)``: a size-n resample with replacement is fitted by EM,
    then every missing cell of the original data is drawn from the
    conditional normal under that fit.  Observed cells are copied verbatim.
    """
    if m < 1:
        raise ValueError(f"number of imputations must be >= 1, got {m}")
    opts = opts or EmOptions()
    _validate(data.values, data.mask, data.names)
    complete, groups = _patterns(data.mask)
    completed, params = [], []
    for j in range(m):
        if not groups:
            completed.append(data)
            params.append(em_fit(data, opts))
            continue
        rng = derive_stream(seed.child("imputation", j))
        theta = _fit_bootstrap(data, opts, rng, j)
        filled = np.array(data.values, copy=True)
        for g in groups:
            coef, cond, _ = _regression(theta.sigma, g.obs, g.mis, opts.ridge)
            xo = filled[np.ix_(g.rows, g.obs)]
            mean = theta.mu[g.mis] + (xo - theta.mu[g.obs]) @ coef.T
            noise = rng.standard_normal((g.rows.size, g.mis.size)) @ _matrix_sqrt(cond).T
            filled[np.ix_(g.rows, g.mis)] = mean + noise
        completed.append(DataMatrix(data.names, filled, np.ones_like(data.mask)))
        params.append(theta)
    return ImputationSet(completed, params)
