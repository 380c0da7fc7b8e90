"""The no-intervention null distribution of group means.

A group mean with no latent effect is Gaussian with covariance
``tau_xx / n_per``, so its squared Mahalanobis norm is chi-square with d
degrees of freedom. The upper tail at the observed norm is the p-value used
for group-level hard thresholding; for d = 1 it coincides with the
two-sided normal p-value of the scalar definition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import linalg as sla
from scipy.stats import chi2

from .errors import (
    DegenerateCovariance,
    LengthMismatch,
    SingularNullCovariance,
    TooFewControlGroups,
    ValidationError,
)
from .model import BadParameters, GroupSummary, MetaDataset, NoiseModel


@dataclass(frozen=True)
class NullPValue:
    """A p-value under the no-intervention null with its test statistic."""

    value: float
    mahalanobis: float
    dof: int

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise ValidationError("p-value must lie in (0, 1]", value=self.value)
        if not (self.mahalanobis >= 0.0):
            raise ValidationError("mahalanobis must be nonnegative", mahalanobis=self.mahalanobis)
        if self.dof < 1:
            raise ValidationError("dof must be positive", dof=self.dof)


def _check_threshold(q: float) -> float:
    q = float(q)
    if not (0.0 < q <= 1.0) or not np.isfinite(q):
        raise BadParameters("threshold q must lie in (0, 1]", q=q)
    return q


def null_p_values(x, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Mahalanobis statistics and null p-values for rows of group means.

    Returns ``(m, p)`` with ``m = n_per * x' tau_xx^{-1} x`` per row and
    ``p`` the chi-square(d) upper tail at ``m``. Requires a strictly
    positive definite ``tau_xx``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = noise.dim
    if x.shape[1] != d:
        raise LengthMismatch("x dimension does not match the noise model",
                             expected=d, got=x.shape[1])
    try:
        factor = sla.cho_factor(noise.tau_xx, lower=True)
    except (np.linalg.LinAlgError, sla.LinAlgError):
        raise SingularNullCovariance("tau_xx must be positive definite to compute p-values")
    sol = sla.cho_solve(factor, x.T)
    m = noise.n_per * np.einsum("kd,dk->k", x, sol)
    m = np.maximum(m, 0.0)
    # Keep p inside (0, 1]: astronomically large statistics would otherwise
    # underflow to an exact zero.
    p = np.maximum(chi2.sf(m, d), np.finfo(float).tiny)
    return m, p


def null_p_value(xbar, noise: NoiseModel) -> NullPValue:
    """Null p-value of a single group-mean vector."""
    xbar = np.asarray(xbar, dtype=float)
    if xbar.ndim != 1:
        raise LengthMismatch("xbar must be a vector", shape=xbar.shape)
    m, p = null_p_values(xbar[None, :], noise)
    return NullPValue(value=float(p[0]), mahalanobis=float(m[0]), dof=noise.dim)


def l0_threshold(data: MetaDataset, noise: NoiseModel, q: float) -> MetaDataset:
    """Zero out the whole x-mean vector of every group whose null p-value is
    at least ``q``; outcomes are never modified.

    All coordinates of a group are kept or zeroed together, so this acts as
    a group-level hard threshold on the first stage.
    """
    q = _check_threshold(q)
    _check_match(data, noise)
    _, p = null_p_values(data.x_matrix(), noise)
    keep = p < q
    new_x = np.where(keep[:, None], data.x_matrix(), 0.0)
    return data.with_x(new_x)


def _check_match(data: MetaDataset, noise: NoiseModel) -> None:
    if data.dim != noise.dim:
        raise LengthMismatch("dataset and noise model dimensions differ",
                             data_dim=data.dim, noise_dim=noise.dim)
    if data.n_per != noise.n_per:
        raise ValidationError("dataset and noise model group sizes differ",
                              data_n_per=data.n_per, noise_n_per=noise.n_per)


def estimate_noise_from_controls(controls: Iterable[GroupSummary] | MetaDataset,
                                 n_per: int | None = None) -> NoiseModel:
    """Estimate the per-unit null covariance from known control groups.

    Uses ``n_per`` times the sample covariance of the stacked
    ``(x_mean, y_mean)`` vectors across control groups, computed about the
    control sample mean. Non-control groups in the input are ignored.
    """
    if isinstance(controls, MetaDataset):
        controls = controls.groups
    groups = [g for g in controls if g.is_control]
    if not groups:
        raise TooFewControlGroups("no control groups in input", controls=0)
    d = groups[0].dim
    for g in groups:
        if g.dim != d:
            raise LengthMismatch("mixed dimensions among control groups", group=g.group_id)
    sizes = {g.n_units for g in groups}
    if len(sizes) != 1:
        raise ValidationError("control groups must share one group size", sizes=sorted(sizes))
    common = sizes.pop()
    if n_per is None:
        n_per = common
    elif n_per != common:
        raise ValidationError("n_per does not match the control group size",
                              n_per=n_per, control_size=common)
    m = len(groups)
    if m < d + 2:
        raise TooFewControlGroups("need at least dim + 2 control groups",
                                  controls=m, required=d + 2)
    stacked = np.array([np.append(g.x_mean, g.y_mean) for g in groups])
    tau_hat = n_per * np.cov(stacked, rowvar=False, ddof=1)
    tau_hat = np.atleast_2d(tau_hat)
    try:
        np.linalg.cholesky(tau_hat[:d, :d])
    except np.linalg.LinAlgError:
        raise DegenerateCovariance("estimated tau_xx is not positive definite", controls=m)
    return NoiseModel(tau=tau_hat, n_per=int(n_per))
