"""Point estimators of the causal-effect vector and the closed-form biases.

All estimators solve no-intercept least squares through a rank-revealing
SVD rather than explicit normal-equation inversion; a Gram-matrix condition
number of 1e10 or worse raises ``SingularDesign`` instead of returning a
wild estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientRetainedGroups,
    LengthMismatch,
    SingularDesign,
    TooFewGroups,
    TooFewRows,
    ZeroDenominator,
)
from .model import MetaDataset, NoiseModel, RegularizedEstimate, ValidationError
from .nulldist import _check_match, _check_threshold, null_p_values

# 2-norm condition number of x'x at or beyond which a design is treated as
# singular.
CONDITION_LIMIT = 1e10


def _solve_no_intercept(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Least squares of y on x without an intercept.

    Returns ``(beta, gram_condition, rank)``. Raises ``SingularDesign`` when
    x'x is rank deficient or its condition number reaches the guard.
    """
    beta, _, rank, sv = np.linalg.lstsq(x, y, rcond=None)
    smax = float(sv[0]) if sv.size else 0.0
    smin = float(sv[-1]) if sv.size else 0.0
    cond = np.inf if smin == 0.0 else (smax / smin) ** 2
    if rank < x.shape[1] or not cond < CONDITION_LIMIT:
        raise SingularDesign("design is numerically singular",
                             condition_number=float(cond), rank=int(rank))
    return beta, float(cond), int(rank)


def _betas_over_grid(x: np.ndarray, y: np.ndarray, pvals: np.ndarray,
                     grid: np.ndarray) -> list[tuple[np.ndarray | None, int]]:
    """Thresholded second-stage fit at every threshold in ``grid``.

    Shares one set of p-values across the whole grid. Entries are
    ``(beta, retained)``; ``beta`` is None where fewer than d groups pass or
    the retained design is singular.
    """
    d = x.shape[1]
    out: list[tuple[np.ndarray | None, int]] = []
    for q in grid:
        mask = pvals < q
        retained = int(mask.sum())
        if retained < d:
            out.append((None, retained))
            continue
        try:
            beta, _, _ = _solve_no_intercept(x[mask], y[mask])
        except SingularDesign:
            out.append((None, retained))
            continue
        out.append((beta, retained))
    return out


def grouped_tsls(data: MetaDataset) -> RegularizedEstimate:
    """Two-stage least squares over grouped experiments: the no-intercept
    regression of group outcome means on group causal-variable means.
    """
    if data.k < data.dim:
        raise TooFewGroups("need at least dim groups", k=data.k, dim=data.dim)
    beta, cond, rank = _solve_no_intercept(data.x_matrix(), data.y_vector())
    return RegularizedEstimate(beta=beta, q=1.0, groups_retained=data.k,
                               condition_number=cond, xtx_rank=rank)


def observational_ols(x, y) -> np.ndarray:
    """No-intercept least squares of unit-level outcomes on unit-level
    causal variables; confounded whenever hidden common causes exist.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise LengthMismatch("x must be (n, d) and y must be (n,)",
                             x_shape=x.shape, y_shape=y.shape)
    if x.shape[0] < x.shape[1]:
        raise TooFewRows("need at least dim rows", rows=x.shape[0], dim=x.shape[1])
    beta, _, _ = _solve_no_intercept(x, y)
    return beta


def regularized_iv(data: MetaDataset, noise: NoiseModel, q: float) -> RegularizedEstimate:
    """Group-thresholded IV estimate: zero every group whose null p-value is
    at least ``q``, then run the grouped second stage.

    Zeroed groups contribute exactly nothing to the normal equations, so the
    fit is computed on the retained rows; this keeps equality with
    ``grouped_tsls`` on the retained subset exact.
    """
    q = _check_threshold(q)
    _check_match(data, noise)
    x = data.x_matrix()
    y = data.y_vector()
    _, pvals = null_p_values(x, noise)
    mask = pvals < q
    retained = int(mask.sum())
    if retained < data.dim:
        raise InsufficientRetainedGroups("too few groups pass the threshold",
                                         retained=retained, required=data.dim, q=q)
    beta, cond, rank = _solve_no_intercept(x[mask], y[mask])
    return RegularizedEstimate(beta=beta, q=q, groups_retained=retained,
                               condition_number=cond, xtx_rank=rank)


def oracle_estimator(zbar_true, y_means) -> np.ndarray:
    """Infeasible benchmark: regress group outcome means on the true latent
    first-stage effects.
    """
    z = np.asarray(zbar_true, dtype=float)
    y = np.asarray(y_means, dtype=float)
    if z.ndim != 2 or y.ndim != 1 or z.shape[0] != y.shape[0]:
        raise LengthMismatch("zbar_true must be (k, d) and y_means (k,)",
                             z_shape=z.shape, y_shape=y.shape)
    if z.shape[0] < z.shape[1]:
        raise TooFewGroups("need at least dim groups", k=z.shape[0], dim=z.shape[1])
    beta, _, _ = _solve_no_intercept(z, y)
    return beta


@dataclass(frozen=True)
class BiasParams:
    """Scalar structural parameters entering the grouped-TSLS bias."""

    psi: float
    gamma: float
    sigma2_u: float
    sigma2_eps_x: float
    n_per: int
    sigma2_zbar: float

    def __post_init__(self):
        if not (self.sigma2_u > 0 and np.isfinite(self.sigma2_u)):
            raise ValidationError("sigma2_u must be positive", sigma2_u=self.sigma2_u)
        if not (self.sigma2_eps_x >= 0 and np.isfinite(self.sigma2_eps_x)):
            raise ValidationError("sigma2_eps_x must be nonnegative",
                                  sigma2_eps_x=self.sigma2_eps_x)
        if not (isinstance(self.n_per, (int, np.integer)) and self.n_per >= 1):
            raise ValidationError("n_per must be a positive integer", n_per=self.n_per)
        if not (self.sigma2_zbar >= 0 and np.isfinite(self.sigma2_zbar)):
            raise ValidationError("sigma2_zbar must be nonnegative",
                                  sigma2_zbar=self.sigma2_zbar)


def tsls_bias_closed_form(p: BiasParams) -> float:
    """Large-K bias of grouped TSLS at fixed group size.

    gamma*psi*(s2u/n) / (psi^2*s2u/n + s2eps/n + s2zbar): group means keep
    confounding noise of order 1/n, so the estimator is inconsistent in the
    many-experiments limit unless the latent effect variance dominates.
    """
    num = p.gamma * p.psi * p.sigma2_u / p.n_per
    den = p.psi**2 * p.sigma2_u / p.n_per + p.sigma2_eps_x / p.n_per + p.sigma2_zbar
    if den <= 0.0:
        raise ZeroDenominator("bias denominator must be positive", denominator=den)
    return num / den


def observational_bias_closed_form(psi: float, gamma: float, sigma2_u: float,
                                   sigma2_eps_x: float) -> float:
    """Large-n bias of the observational (unit-level) regression:
    gamma*psi*s2u / (psi^2*s2u + s2eps).
    """
    den = psi**2 * sigma2_u + sigma2_eps_x
    if den <= 0.0:
        raise ZeroDenominator("bias denominator must be positive", denominator=den)
    return gamma * psi * sigma2_u / den
