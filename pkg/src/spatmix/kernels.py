"""Cross-covariance kernels for multivariate spatial random fields.

Covariances between component i at site s and component j at site s' are
built by mixing exponential kernels over a pair of dependent nonnegative
gamma variables (U, V) = (X0 + X1, X0 + X2).  The shared summand X0
couples the spatial and between-component decay; X0 degenerate at zero
gives a fully separable product structure.  Closing the mixture integral
in terms of gamma moment generating functions gives the closed form
evaluated by :func:`eval_gamma_mixture_cov`.

Matrix layout convention (fixed everywhere in this package): the np-long
stacked vector is component-major over sites, flat index = i*n + k for
component i at site k.  A separable covariance is then the Kronecker
product A (x) R with A the p x p component covariance and R the n x n
spatial correlation.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

# Relative diagonal inflation tried in order before a matrix is declared
# invalid.  First entry 0 keeps well-conditioned matrices bit-exact.
NUGGET_LADDER = (0.0, 1e-8, 1e-6)


class InvalidCovarianceError(Exception):
    """Covariance matrix failed Cholesky at every nugget level.

    Raised as a distinguished invalid-parameter signal; MCMC proposal
    rejection relies on catching this, so it must never be swallowed.
    """


def _check_symmetric(m, name, tol=0.0):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0.0, atol=tol):
        raise ValueError(f"{name} must be symmetric")
    return m


@dataclass(frozen=True)
class MixingSpec:
    """Shapes and rates of the three independent gamma mixing variables.

    ``alpha0 == 0`` encodes the degenerate X0 = 0 (separable) case; all
    rates must be strictly positive.
    """

    alpha0: float
    alpha1: float
    alpha2: float
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("alpha0", "alpha1", "alpha2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("lambda0", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {v}")


@dataclass
class CovarianceParams:
    """Full parameter vector of the general cross-covariance model.

    sigma   -- per-component scale, any sign (covariance uses products)
    delta   -- symmetric latent component distances, zero diagonal
    b       -- symmetric positive spatial ranges, distance units
    alpha0  -- coupling exponent (0 = separable)
    alpha1, alpha2 -- spatial / component smoothness exponents
    beta    -- regression coefficients, one block of q+1 per component
    common_range -- all b entries tied to a single range phi
    """

    sigma: np.ndarray
    delta: np.ndarray
    b: np.ndarray
    alpha0: float
    alpha1: float
    alpha2: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    common_range: bool = False

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        p = self.sigma.shape[0]
        self.delta = _check_symmetric(self.delta, "delta")
        self.b = _check_symmetric(self.b, "b")
        if self.delta.shape != (p, p) or self.b.shape != (p, p):
            raise ValueError("delta and b must be p x p with p = len(sigma)")
        if np.any(self.delta < 0):
            raise ValueError("delta entries must be >= 0")
        if np.any(np.diag(self.delta) != 0.0):
            raise ValueError("delta must have zero diagonal")
        if np.any(self.b <= 0):
            raise ValueError("b entries must be > 0")
        if not (np.isfinite(self.alpha0) and self.alpha0 >= 0):
            raise ValueError("alpha0 must be finite and >= 0")
        if not (np.isfinite(self.alpha1) and self.alpha1 > 0):
            raise ValueError("alpha1 must be finite and > 0")
        if not (np.isfinite(self.alpha2) and self.alpha2 > 0):
            raise ValueError("alpha2 must be finite and > 0")
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.common_range and not np.all(self.b == self.b.flat[0]):
            raise ValueError("common_range=True requires all b entries equal")

    @property
    def p(self):
        return self.sigma.shape[0]

    @property
    def phi(self):
        """Common spatial range; only meaningful when common_range is set."""
        return float(self.b[0, 0])

    @classmethod
    def with_common_range(cls, sigma, delta, phi, alpha0, alpha1, alpha2,
                          beta=()):
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        p = sigma.shape[0]
        return cls(sigma=sigma, delta=np.asarray(delta, dtype=float),
                   b=np.full((p, p), float(phi)), alpha0=alpha0,
                   alpha1=alpha1, alpha2=alpha2, beta=np.asarray(beta, float),
                   common_range=True)

    def mixing_spec(self):
        """Unit-rate mixing variables induced by this parameter set."""
        return MixingSpec(self.alpha0, self.alpha1, self.alpha2)


@dataclass
class SeparableParams:
    """Separable family: component covariance matrix and one spatial range."""

    a: np.ndarray
    phi: float

    def __post_init__(self):
        self.a = _check_symmetric(self.a, "a", tol=1e-12)
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise ValueError("phi must be finite and > 0")
        try:
            np.linalg.cholesky(self.a)
        except np.linalg.LinAlgError:
            raise ValueError("a must be positive definite") from None

    @property
    def p(self):
        return self.a.shape[0]


@dataclass
class CovMatrix:
    """Dense np x np covariance with its layout made explicit."""

    values: np.ndarray
    n: int
    p: int
    layout: str = "component-major"

    @property
    def dim(self):
        return self.n * self.p

    def cholesky(self):
        """Lower factor after the nugget ladder; see chol_with_nugget."""
        return chol_with_nugget(self.values)


def _validate_scalar_inputs(i, j, h, p):
    if not (0 <= i < p and 0 <= j < p):
        raise ValueError(f"component indices must be in [0, {p}), got ({i}, {j})")
    h = np.asarray(h, dtype=float)
    if np.any(~np.isfinite(h)):
        raise ValueError("distance h must be finite")
    if np.any(h < 0):
        raise ValueError("distance h must be >= 0")
    return h


def eval_gamma_mixture_cov(i, j, h, params, mix):
    """Closed-form cross-covariance of the gamma-mixture class.

    Parameters
    ----------
    i, j : int
        Zero-based component indices.
    h : float or ndarray
        Nonnegative spatial distance(s).
    params : CovarianceParams
        Supplies sigma, the latent distances delta and the ranges b.
        Its alpha fields are ignored here; shapes and rates come from
        ``mix``.
    mix : MixingSpec
        Gamma shapes/rates of the mixing variables.

    Returns
    -------
    float or ndarray
        sigma_i sigma_j (1+(g1+g2)/l0)^-a0 (1+g1/l1)^-a1 (1+g2/l2)^-a2
        with g1 = h / b_ij and g2 = delta_ij.
    """
    h = _validate_scalar_inputs(i, j, h, params.p)
    g1 = h / params.b[i, j]
    g2 = params.delta[i, j]
    out = (params.sigma[i] * params.sigma[j]
           * (1.0 + (g1 + g2) / mix.lambda0) ** (-mix.alpha0)
           * (1.0 + g1 / mix.lambda1) ** (-mix.alpha1)
           * (1.0 + g2 / mix.lambda2) ** (-mix.alpha2))
    return out if isinstance(out, np.ndarray) else float(out)


def eval_general_cross_cov(i, j, h, params):
    """Unit-rate special case used for inference.

    Equals ``eval_gamma_mixture_cov`` with all rates fixed at one:
    sigma_i sigma_j (1+delta_ij+h/b_ij)^-a0 (1+h/b_ij)^-a1 (1+delta_ij)^-a2.
    """
    h = _validate_scalar_inputs(i, j, h, params.p)
    g1 = h / params.b[i, j]
    g2 = params.delta[i, j]
    out = (params.sigma[i] * params.sigma[j]
           * (1.0 + g1 + g2) ** (-params.alpha0)
           * (1.0 + g1) ** (-params.alpha1)
           * (1.0 + g2) ** (-params.alpha2))
    return out if isinstance(out, np.ndarray) else float(out)


def mc_mixture_oracle(i, j, h, params, mix, n_draws=10**6, seed=0):
    """Monte Carlo estimate of the mixture integral behind the closed form.

    Draws (U, V) = (X0+X1, X0+X2) from the gamma MixingSpec and averages
    exp(-g1 U - g2 V), scaled by sigma_i sigma_j.  Returns the estimate
    and the standard error of the mean.  Deterministic for a fixed seed.
    """
    if n_draws < 10**4:
        raise ValueError(f"n_draws must be >= 1e4, got {n_draws}")
    h = _validate_scalar_inputs(i, j, h, params.p)
    rng = np.random.default_rng(seed)
    g1 = float(h) / params.b[i, j]
    g2 = params.delta[i, j]
    if mix.alpha0 > 0:
        x0 = rng.gamma(mix.alpha0, 1.0 / mix.lambda0, size=n_draws)
    else:
        x0 = np.zeros(n_draws)
    x1 = rng.gamma(mix.alpha1, 1.0 / mix.lambda1, size=n_draws)
    x2 = rng.gamma(mix.alpha2, 1.0 / mix.lambda2, size=n_draws)
    sample = np.exp(-g1 * (x0 + x1) - g2 * (x0 + x2))
    scale = params.sigma[i] * params.sigma[j]
    estimate = scale * sample.mean()
    std_error = abs(scale) * sample.std(ddof=1) / np.sqrt(n_draws)
    return float(estimate), float(std_error)


def normalize_to_correlation(cov):
    """Rescale a covariance to unit diagonal.

    Entry (a, b) is divided by the geometric mean of the two diagonal
    (zero-lag variance) entries.  Accepts and returns either a CovMatrix
    or a bare ndarray.
    """
    values = cov.values if isinstance(cov, CovMatrix) else np.asarray(cov, float)
    d = np.diag(values)
    if np.any(d <= 0):
        raise ValueError("all diagonal entries must be > 0 to normalize")
    s = 1.0 / np.sqrt(d)
    out = values * np.outer(s, s)
    if isinstance(cov, CovMatrix):
        return CovMatrix(values=out, n=cov.n, p=cov.p, layout=cov.layout)
    return out


def site_distances(sites):
    """Pairwise Euclidean distance matrix of planar site coordinates."""
    sites = np.asarray(sites, dtype=float)
    diff = sites[:, None, :] - sites[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def cross_cov_block(i, j, dists, params):
    """n x n covariance block between components i and j (general model)."""
    g1 = dists / params.b[i, j]
    g2 = params.delta[i, j]
    block = (1.0 + g1) ** (-params.alpha1) * (1.0 + g2) ** (-params.alpha2)
    if params.alpha0 != 0.0:
        block = block * (1.0 + g1 + g2) ** (-params.alpha0)
    return params.sigma[i] * params.sigma[j] * block


def assemble_cross_cov(dists, params):
    """Dense np x np general-model covariance (component-major layout)."""
    n = dists.shape[0]
    p = params.p
    out = np.empty((n * p, n * p))
    for i in range(p):
        for j in range(i, p):
            block = cross_cov_block(i, j, dists, params)
            out[i * n:(i + 1) * n, j * n:(j + 1) * n] = block
            if j > i:
                out[j * n:(j + 1) * n, i * n:(i + 1) * n] = block.T
    return out


def build_cov_matrix(sites, params):
    """Assemble the general-model covariance over a site list.

    Entry ((i,k), (j,l)) equals eval_general_cross_cov(i, j, |s_k - s_l|).
    Validity is a runtime property: call ``.cholesky()`` on the result,
    which raises InvalidCovarianceError after the nugget ladder fails.
    """
    dists = site_distances(sites)
    values = assemble_cross_cov(dists, params)
    return CovMatrix(values=values, n=dists.shape[0], p=params.p)


def cauchy_correlation(dists, phi):
    """Spatial correlation (1 + (h/phi)^2)^-1."""
    if phi <= 0:
        raise ValueError("phi must be > 0")
    return 1.0 / (1.0 + (dists / phi) ** 2)


def eval_univariate_cauchy(h, sigma2, phi):
    """Single-component covariance sigma2 * (1 + (h/phi)^2)^-1."""
    if phi <= 0:
        raise ValueError("phi must be > 0")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("distance h must be >= 0")
    out = sigma2 / (1.0 + (h / phi) ** 2)
    return out if isinstance(out, np.ndarray) else float(out)


@dataclass
class KroneckerCov:
    """Separable covariance A (x) R with factor handles.

    Log-determinants and solves go through the small Cholesky factors:
    log|Sigma| = n log|A| + p log|R| and Sigma^-1 = A^-1 (x) R^-1.
    """

    a: np.ndarray
    r: np.ndarray
    chol_a: np.ndarray
    chol_r: np.ndarray

    @property
    def p(self):
        return self.a.shape[0]

    @property
    def n(self):
        return self.r.shape[0]

    @property
    def dim(self):
        return self.n * self.p

    @property
    def values(self):
        return np.kron(self.a, self.r)

    def as_cov_matrix(self):
        return CovMatrix(values=self.values, n=self.n, p=self.p)

    @property
    def log_det(self):
        la = 2.0 * np.sum(np.log(np.diag(self.chol_a)))
        lr = 2.0 * np.sum(np.log(np.diag(self.chol_r)))
        return self.n * la + self.p * lr

    def _factor_solve(self, chol, mat):
        y = solve_triangular(chol, mat, lower=True)
        return solve_triangular(chol.T, y, lower=False)

    def solve(self, x):
        """Sigma^-1 x for a flat component-major vector (or stack of them)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = x[None, :] if single else x
        out = np.empty_like(xs)
        for idx, vec in enumerate(xs):
            m = vec.reshape(self.p, self.n)
            z = self._factor_solve(self.chol_a, m)
            z = self._factor_solve(self.chol_r, z.T).T
            out[idx] = z.ravel()
        return out[0] if single else out


def build_separable_cov(sites, sep):
    """Separable covariance over a site list with Kronecker handles.

    Spatial correlation is the squared-distance Cauchy form
    (1 + (h/phi)^2)^-1; the component covariance is sep.a.
    """
    dists = site_distances(sites)
    r = cauchy_correlation(dists, sep.phi)
    try:
        chol_a = np.linalg.cholesky(sep.a)
        chol_r = np.linalg.cholesky(r)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError(f"separable factor not PD: {exc}") from None
    return KroneckerCov(a=sep.a, r=r, chol_a=chol_a, chol_r=chol_r)


def separability_measure(alpha0, alpha1, alpha2):
    """Correlation of the mixing pair (U, V): alpha0 / sqrt((a0+a1)(a0+a2)).

    Zero means separable; values approach one for strong coupling.
    """
    if alpha1 <= 0 or alpha2 <= 0:
        raise ValueError("alpha1 and alpha2 must be > 0")
    if alpha0 < 0:
        raise ValueError("alpha0 must be >= 0")
    return float(alpha0 / np.sqrt((alpha0 + alpha1) * (alpha0 + alpha2)))


def alpha0_for_measure(rho, alpha1=1.0, alpha2=1.0):
    """Invert the separability measure for equal alpha1 = alpha2 = a.

    With both smoothness exponents equal to a, rho = alpha0/(alpha0+a),
    so alpha0 = a * rho / (1 - rho).
    """
    if alpha1 != alpha2:
        raise ValueError("closed-form inversion requires alpha1 == alpha2")
    if not 0 <= rho < 1:
        raise ValueError("rho must be in [0, 1)")
    return alpha1 * rho / (1.0 - rho)


def chol_with_nugget(values, ladder=NUGGET_LADDER):
    """Lower Cholesky factor, climbing the diagonal-inflation ladder.

    Each rung adds eps * mean(diag) to the diagonal.  Returns the factor
    and the eps actually used; raises InvalidCovarianceError when every
    rung fails.  Never repairs beyond the declared ladder.
    """
    values = np.asarray(values, dtype=float)
    mean_diag = float(np.mean(np.diag(values)))
    for eps in ladder:
        try:
            shifted = values if eps == 0.0 else values + eps * mean_diag * np.eye(values.shape[0])
            return np.linalg.cholesky(shifted), eps
        except np.linalg.LinAlgError:
            continue
    raise InvalidCovarianceError(
        f"Cholesky failed at all nugget levels {ladder}")
