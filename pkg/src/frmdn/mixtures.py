"""Per-step output distributions: diagonal Gaussian, tied-precision
Gaussian, and logistic mixtures.

The tied family factorizes each component's precision as U D_k U^T with
one full matrix U shared across components and a positive diagonal D_k
per component.  `d_diag` therefore stores standard deviations for the
diagonal family, precision diagonals for the tied family, and scales for
the logistic family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import EXP_CLAMP

LOG_2PI = math.log(2.0 * math.pi)

STRUCTURES = ("diagonal", "tied", "logistic")


class DegenerateMatrixError(ValueError):
    pass


@dataclass
class MixtureParams:
    """Parameters of one K-component mixture over R^d."""

    alpha: np.ndarray      # (K,) coefficients, positive, sum to 1
    mu: np.ndarray         # (K, d) means
    d_diag: np.ndarray     # (K, d) stds / precision diagonals / scales
    structure: str = "diagonal"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.d_diag = np.atleast_2d(np.asarray(self.d_diag, dtype=np.float64))

    @property
    def k(self):
        return self.alpha.shape[0]

    @property
    def dim(self):
        return self.mu.shape[1]

    def validate(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown mixture structure {self.structure!r}")
        if self.mu.shape != (self.k, self.dim) or self.d_diag.shape != self.mu.shape:
            raise ValueError("mixture parameter shapes are inconsistent")
        if abs(self.alpha.sum() - 1.0) > 1e-12:
            raise ValueError("mixture coefficients must sum to 1")
        if np.any(self.alpha <= 0.0) or np.any(self.alpha >= 1.0 + 1e-12):
            raise ValueError("mixture coefficients must lie in (0, 1)")
        if np.any(self.d_diag <= 0.0):
            raise ValueError("scale entries must be positive")


@dataclass
class SharedMatrix:
    """The full matrix shared by all components of a tied mixture."""

    u: np.ndarray
    structure: str = "full"       # "identity" | "full"
    _log_abs_det: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), structure="identity", _log_abs_det=0.0)

    def update(self, u):
        """Replace U and invalidate the cached determinant."""
        self.u = np.asarray(u, dtype=np.float64)
        self._log_abs_det = None

    @property
    def log_abs_det(self):
        if self._log_abs_det is None:
            self._log_abs_det = _checked_log_abs_det(self.u)
        return self._log_abs_det


def _checked_log_abs_det(u):
    # LU with partial pivoting via LAPACK; reject |det| below 1e-12 of the
    # Hadamard bound (the matrix's natural scale).
    sign, ld = np.linalg.slogdet(u)
    row_norms = np.sqrt((u * u).sum(axis=1))
    hadamard = float(np.log(np.maximum(row_norms, 1e-300)).sum())
    if sign == 0.0 or ld < math.log(1e-12) + hadamard:
        raise DegenerateMatrixError("degenerate shared matrix")
    return float(ld)


@dataclass
class ParamCountReport:
    alpha_count: int
    mu_count: int
    sigma_count: int

    @property
    def total(self):
        return self.alpha_count + self.mu_count + self.sigma_count


# ---------------------------------------------------------------------------
# head activations
# ---------------------------------------------------------------------------

def coeffs_from_logits(z_alpha):
    """Softmax with max subtraction."""
    z = np.asarray(z_alpha, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def diag_scales_from_logits(z_sigma):
    """Elementwise exp of the logits clamped to +-EXP_CLAMP."""
    z = np.asarray(z_sigma, dtype=np.float64)
    return np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP))


# ---------------------------------------------------------------------------
# log densities
# ---------------------------------------------------------------------------

def _check_point(y, params):
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != params.dim:
        raise ValueError(
            f"dimension mismatch: point has {y.shape[0]} entries, "
            f"mixture is over R^{params.dim}"
        )
    return y


def diag_gmm_log_density(y, params):
    """log sum_k alpha_k N(y; mu_k, diag(sigma_k^2)), via log-sum-exp."""
    if params.structure != "diagonal":
        raise ValueError("diag_gmm_log_density needs structure='diagonal'")
    y = _check_point(y, params)
    sigma = params.d_diag
    z = (y[None, :] - params.mu) / sigma
    comp = (
        np.log(params.alpha)
        - 0.5 * params.dim * LOG_2PI
        - np.log(sigma).sum(axis=1)
        - 0.5 * (z * z).sum(axis=1)
    )
    return _lse(comp)


def tied_gmm_log_density(y, params, shared):
    """Tied-precision mixture: component precision U D_k U^T.

    `d_diag` holds the D_k diagonals (precisions, not standard deviations).
    """
    if params.structure != "tied":
        raise ValueError("tied_gmm_log_density needs structure='tied'")
    y = _check_point(y, params)
    ld_u = shared.log_abs_det
    v = (y[None, :] - params.mu) @ shared.u        # rows are (U^T (y - mu_k))^T
    comp = (
        np.log(params.alpha)
        - 0.5 * params.dim * LOG_2PI
        + ld_u
        + 0.5 * np.log(params.d_diag).sum(axis=1)
        - 0.5 * (v * v * params.d_diag).sum(axis=1)
    )
    return _lse(comp)


def logistic_mixture_log_density(y, params, c_width=1.0):
    """Mixture of per-dimension logistic bin probabilities of width C.

    Each dimension contributes (1/C) * (sigmoid((y-mu+C/2)/s)
    - sigmoid((y-mu-C/2)/s)); dimensions are independent within a
    component.  Evaluated in log space through the identity
    sigmoid(a) - sigmoid(b) = sigmoid(a) * sigmoid(-b) * (1 - e^{b-a}).
    """
    if params.structure != "logistic":
        raise ValueError("logistic_mixture_log_density needs structure='logistic'")
    if c_width <= 0.0:
        raise ValueError("c_width must be positive")
    if np.any(params.d_diag <= 0.0):
        raise ValueError("logistic scales must be positive")
    y = _check_point(y, params)
    s = params.d_diag
    u = (y[None, :] - params.mu) / s
    half = c_width / (2.0 * s)
    per_dim = (
        _log_sigmoid(u + half)
        + _log_sigmoid(-(u - half))
        + _log1mexp(c_width / s)
        - math.log(c_width)
    )
    comp = np.log(params.alpha) + per_dim.sum(axis=1)
    return _lse(comp)


def _lse(v):
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _log1mexp(r):
    """log(1 - e^{-r}) for r > 0, stable near both ends."""
    r = np.asarray(r, dtype=np.float64)
    out = np.empty_like(r)
    small = r < math.log(2.0)
    out[small] = np.log(-np.expm1(-r[small]))
    out[~small] = np.log1p(-np.exp(-r[~small]))
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def pick_component(alpha, rng):
    """Inverse-CDF draw from the coefficients; ties go to the lower index."""
    cum = np.cumsum(alpha)
    u = rng.uniform()
    return int(np.searchsorted(cum, u, side="left").clip(0, alpha.shape[0] - 1))


def mixture_sample(params, shared, rng):
    """Draw one d-vector: pick a component, then sample it.

    tied components have covariance (U D_k U^T)^{-1}, realized as
    mu_k + solve(U^T, D_k^{-1/2} * xi) with xi standard normal.
    """
    k = pick_component(params.alpha, rng)
    mu = params.mu[k]
    if params.structure == "diagonal":
        return mu + params.d_diag[k] * rng.standard_normal(params.dim)
    if params.structure == "tied":
        if shared is None:
            raise ValueError("tied mixtures need their shared matrix to sample")
        xi = rng.standard_normal(params.dim)
        return mu + np.linalg.solve(shared.u.T, xi / np.sqrt(params.d_diag[k]))
    if params.structure == "logistic":
        u = rng.uniform(size=params.dim)
        return mu + params.d_diag[k] * np.log(u / (1.0 - u))
    raise ValueError(f"unknown mixture structure {params.structure!r}")


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def param_count(k, d, structure):
    """Parameter totals of the three mixture factorizations.

    full: K(2 + 3d + d^2)/2, diagonal: K(1 + 2d), tied: K(1 + 2d) + d^2.
    """
    if k < 1 or d < 1:
        raise ValueError("k and d must be at least 1")
    if structure == "full":
        return ParamCountReport(k, k * d, k * d * (d + 1) // 2)
    if structure == "diagonal":
        return ParamCountReport(k, k * d, k * d)
    if structure == "tied":
        return ParamCountReport(k, k * d, d * d + k * d)
    raise ValueError(f"unknown structure {structure!r} for param_count")


def stored_param_count(k, d, structure):
    """Allocate the actual parameter blocks of a head and count their
    entries; cross-checks `param_count` against real storage."""
    alpha = np.zeros(k)
    mu = np.zeros((k, d))
    if structure == "full":
        tril = [np.zeros(d * (d + 1) // 2) for _ in range(k)]
        sigma_count = sum(t.size for t in tril)
    elif structure == "diagonal":
        sigma_count = np.zeros((k, d)).size
    elif structure == "tied":
        sigma_count = np.zeros((k, d)).size + np.zeros((d, d)).size
    else:
        raise ValueError(f"unknown structure {structure!r}")
    return ParamCountReport(alpha.size, mu.size, sigma_count)
