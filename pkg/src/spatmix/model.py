"""Dataset container, block regression design and Gaussian log-likelihoods."""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .kernels import (
    CovarianceParams,
    KroneckerCov,
    assemble_cross_cov,
    build_separable_cov,
    chol_with_nugget,
    site_distances,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class MissingDataError(ValueError):
    """Training responses contain missing values; fitting requires none."""


@dataclass
class SpatialDataset:
    """Multivariate spatial data with independent replicates.

    sites       -- (n, 2) planar coordinates
    covariates  -- (n, q) per-site regressors
    responses   -- (T, n, p) array, NaN marks a missing cell
    component_names -- length-p labels
    site_ids    -- stable external identifiers kept through I/O
    """

    sites: np.ndarray
    covariates: np.ndarray
    responses: np.ndarray
    component_names: list = None
    site_ids: list = None
    covariate_names: list = None

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        self.responses = np.asarray(self.responses, dtype=float)
        if self.sites.ndim != 2 or self.sites.shape[1] != 2:
            raise ValueError("sites must be (n, 2)")
        n = self.sites.shape[0]
        if self.covariates.ndim != 2 or self.covariates.shape[0] != n:
            raise ValueError("covariates must be (n, q)")
        if self.responses.ndim != 3 or self.responses.shape[1] != n:
            raise ValueError("responses must be (T, n, p)")
        if n < 1 or self.T < 1 or self.p < 1:
            raise ValueError("need n >= 1, T >= 1, p >= 1")
        if self.component_names is None:
            self.component_names = [f"y{i + 1}" for i in range(self.p)]
        if len(self.component_names) != self.p:
            raise ValueError("component_names length must equal p")
        if self.site_ids is None:
            self.site_ids = [str(k) for k in range(n)]
        if len(self.site_ids) != n:
            raise ValueError("site_ids length must equal n")
        if self.covariate_names is None:
            self.covariate_names = [f"z{m + 1}" for m in range(self.q)]
        if len(self.covariate_names) != self.q:
            raise ValueError("covariate_names length must equal q")

    @property
    def n(self):
        return self.sites.shape[0]

    @property
    def q(self):
        return self.covariates.shape[1]

    @property
    def T(self):
        return self.responses.shape[0]

    @property
    def p(self):
        return self.responses.shape[2]

    def has_missing(self):
        return bool(np.isnan(self.responses).any())

    def stacked_responses(self):
        """(T, n*p) responses in the component-major layout."""
        # responses[t, k, i] -> flat index i*n + k
        return np.transpose(self.responses, (0, 2, 1)).reshape(self.T, -1)

    def subset_sites(self, site_indices):
        """New dataset restricted to the given site indices (order kept)."""
        idx = np.asarray(site_indices, dtype=int)
        return SpatialDataset(
            sites=self.sites[idx],
            covariates=self.covariates[idx],
            responses=self.responses[:, idx, :],
            component_names=list(self.component_names),
            site_ids=[self.site_ids[k] for k in idx],
            covariate_names=list(self.covariate_names),
        )

    def distances(self):
        return site_distances(self.sites)

    def median_distance(self):
        """Median over the n(n-1)/2 distinct site pairs."""
        if self.n < 2:
            raise ValueError("median distance needs at least two sites")
        d = self.distances()
        iu = np.triu_indices(self.n, k=1)
        return float(np.median(d[iu]))


@dataclass
class MeanModel:
    """Block regression design: each component owns an intercept + q slopes.

    Coefficient ordering is component-blocked, beta = (beta_1; ...; beta_p)
    with beta_i = (intercept, slope_1, ..., slope_q).  The standardization
    applied to covariates is recorded so designs at new sites reuse it.
    """

    design: np.ndarray
    p: int
    q: int
    center: np.ndarray
    scale: np.ndarray
    beta: np.ndarray = None

    @property
    def n_coef(self):
        return self.p * (self.q + 1)

    def design_for(self, covariates):
        """Design rows for new sites under the recorded transform."""
        z = (np.asarray(covariates, dtype=float) - self.center) / self.scale
        return _block_design(z, self.p)


def _block_design(z, p):
    m, q = z.shape
    w = np.hstack([np.ones((m, 1)), z])
    x = np.zeros((m * p, p * (q + 1)))
    for i in range(p):
        x[i * m:(i + 1) * m, i * (q + 1):(i + 1) * (q + 1)] = w
    return x


def build_design(data, standardize=True):
    """Block design matrix for the dataset, with a rank check.

    Covariates are centered and scaled to unit standard deviation by
    default; the transform is recorded on the returned MeanModel.  A rank
    deficient design raises ValueError naming the offending columns.
    """
    z = data.covariates
    if not np.all(np.isfinite(z)):
        raise ValueError("covariates must be finite")
    if standardize and data.q > 0 and data.n > 1:
        center = z.mean(axis=0)
        scale = z.std(axis=0, ddof=0)
        if np.any(scale == 0):
            bad = [data.covariate_names[m] for m in np.where(scale == 0)[0]]
            raise ValueError(f"constant covariate column(s): {bad}")
        zs = (z - center) / scale
    else:
        center = np.zeros(data.q)
        scale = np.ones(data.q)
        zs = z
    x = _block_design(zs, data.p)
    w = np.hstack([np.ones((data.n, 1)), zs])
    rank = np.linalg.matrix_rank(w)
    if rank < w.shape[1]:
        _, _, piv = qr(w, mode="economic", pivoting=True)
        offending = sorted(piv[rank:].tolist())
        names = ["intercept"] + list(data.covariate_names)
        raise ValueError(
            "rank-deficient design; offending columns: "
            + ", ".join(names[c] for c in offending))
    return MeanModel(design=x, p=data.p, q=data.q, center=center, scale=scale)


def gaussian_loglik_chol(y, mu, chol):
    """Log density of T independent N(mu, Sigma) rows given chol(Sigma).

    y is (T, d) or (d,); one factorization is reused across replicates.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    t, d = y.shape
    resid = y - mu
    z = solve_triangular(chol, resid.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * t * d * LOG_2PI - 0.5 * t * log_det
                 - 0.5 * np.sum(z * z))


def log_likelihood(data, params, mean_model=None, dists=None):
    """Exact Gaussian log-likelihood under the general covariance model.

    Raises MissingDataError on NaN responses and InvalidCovarianceError
    (from the nugget ladder) when the assembled covariance is not usable;
    callers in the sampler treat the latter as a proposal rejection.
    """
    if data.has_missing():
        raise MissingDataError("training responses contain missing values")
    if mean_model is None:
        mean_model = build_design(data)
    if dists is None:
        dists = data.distances()
    cov = assemble_cross_cov(dists, params)
    chol, _ = chol_with_nugget(cov)
    mu = mean_model.design @ params.beta
    return gaussian_loglik_chol(data.stacked_responses(), mu, chol)


def log_likelihood_kronecker(data, sep, beta, mean_model=None, kron=None):
    """Gaussian log-likelihood for the separable family via factor algebra.

    Numerically identical to the dense path on the assembled A (x) R, but
    determinants and solves use the small factors only.
    """
    if data.has_missing():
        raise MissingDataError("training responses contain missing values")
    if mean_model is None:
        mean_model = build_design(data)
    if kron is None:
        kron = build_separable_cov(data.sites, sep)
    mu = mean_model.design @ np.asarray(beta, dtype=float)
    y = data.stacked_responses()
    t = y.shape[0]
    d = kron.dim
    resid = y - mu
    qf = 0.0
    for row in resid:
        m = row.reshape(kron.p, kron.n)
        za = solve_triangular(kron.chol_a, m, lower=True)
        z = solve_triangular(kron.chol_r, za.T, lower=True)
        qf += float(np.sum(z * z))
    return float(-0.5 * t * d * LOG_2PI - 0.5 * t * kron.log_det - 0.5 * qf)
