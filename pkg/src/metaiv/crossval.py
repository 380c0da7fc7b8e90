"""Threshold selection by cross-validation on within-group fold splits.

Two routes produce the fold pairs. With raw unit rows, each group is
randomly partitioned and per-fold group means are computed. With summary
statistics only, half-group means are simulated exactly from the
conditional Gaussian distribution of a half mean given the observed full
mean and the null covariance.

Either way, the loss for a threshold trains the regularized estimator on
one fold, predicts each group's outcome from that fold's unthresholded
causal means, and scores squared error against the other fold's outcome
means. Folds share the latent effect but carry independent confounding
noise, so this loss tracks interventional rather than predictive error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BadParameters,
    GroupTooSmall,
    LengthMismatch,
    NoEstimableThreshold,
    ValidationError,
)
from .estimators import _betas_over_grid, regularized_iv
from .model import CvResult, GroupSummary, MetaDataset, NoiseModel, psd_sqrt
from .nulldist import _check_match, null_p_values


def default_grid(lo: float = 1e-6, hi: float = 1.0, points: int = 25) -> np.ndarray:
    """Log-spaced threshold grid, 25 points on [1e-6, 1] by default."""
    if not (0.0 < lo <= hi <= 1.0):
        raise BadParameters("grid bounds must satisfy 0 < lo <= hi <= 1", lo=lo, hi=hi)
    if points < 1:
        raise BadParameters("grid needs at least one point", points=points)
    if points == 1:
        return np.array([hi])
    return np.geomspace(lo, hi, points)


def _normalize_grid(grid) -> np.ndarray:
    g = np.unique(np.asarray(grid, dtype=float))
    if g.size == 0:
        raise BadParameters("threshold grid is empty")
    if np.any(~np.isfinite(g)) or np.any(g <= 0.0) or np.any(g > 1.0):
        raise BadParameters("thresholds must lie in (0, 1]")
    return g


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (int, np.integer)):
        return np.random.SeedSequence(int(seed))
    raise BadParameters("seed must be an integer or a SeedSequence",
                        got=type(seed).__name__)


@dataclass(frozen=True, eq=False)
class RawUnitData:
    """Unit-level rows (x, y, group_id); the group id is the instrument."""

    x: np.ndarray
    y: np.ndarray
    group_ids: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        gids = np.asarray(self.group_ids)
        if x.ndim != 2 or y.ndim != 1 or gids.ndim != 1:
            raise ValidationError("x must be (n, d); y and group_ids must be (n,)")
        if not (x.shape[0] == y.shape[0] == gids.shape[0]):
            raise ValidationError("row counts differ across x, y, group_ids",
                                  x_rows=x.shape[0], y_rows=y.shape[0], id_rows=gids.shape[0])
        if x.shape[0] == 0:
            raise ValidationError("raw data has no rows")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValidationError("raw data contains non-finite values")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "group_ids", gids)

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def group_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique ids in first-appearance order and the per-row group index."""
        uniq, first, inv = np.unique(self.group_ids, return_index=True, return_inverse=True)
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        return uniq[order], rank[inv]


@dataclass(frozen=True, eq=False)
class SplitPair:
    """Two group-aligned fold datasets whose means average back to a source."""

    fold_a: MetaDataset
    fold_b: MetaDataset

    def __post_init__(self):
        a, b = self.fold_a, self.fold_b
        if a.ids() != b.ids():
            raise ValidationError("fold group ids must match in order")
        if a.dim != b.dim or a.n_per != b.n_per:
            raise ValidationError("folds must share dimension and group size",
                                  a=(a.dim, a.n_per), b=(b.dim, b.n_per))


def group_means(data: RawUnitData, is_control: Sequence[bool] | None = None) -> MetaDataset:
    """Per-group means of raw rows; groups must share one size."""
    uniq, gidx = data.group_index()
    counts = np.bincount(gidx)
    if counts.min() != counts.max():
        bad = uniq[int(np.argmin(counts))]
        raise ValidationError("groups must share a common size", group=bad,
                              smallest=int(counts.min()), largest=int(counts.max()))
    k, n = counts.size, int(counts[0])
    xm = np.empty((k, data.dim))
    for j in range(data.dim):
        xm[:, j] = np.bincount(gidx, weights=data.x[:, j], minlength=k)
    xm /= n
    ym = np.bincount(gidx, weights=data.y, minlength=k) / n
    return MetaDataset.from_arrays(xm, ym, n_per=n, ids=list(uniq), is_control=is_control)


def split_raw(data: RawUnitData, folds: int, seed) -> list[MetaDataset]:
    """Randomly partition each group into ``folds`` near-equal parts and
    return the per-fold datasets of group means.

    Part sizes within a group differ by at most one, with the larger parts
    always in the lower fold indices, so fold group sizes stay constant
    across groups. The same seed reproduces the same partition.
    """
    if not isinstance(folds, (int, np.integer)) or folds < 2:
        raise BadParameters("folds must be an integer of at least 2", folds=folds)
    uniq, gidx = data.group_index()
    counts = np.bincount(gidx)
    if int(counts.min()) < folds:
        bad = uniq[int(np.argmin(counts))]
        raise GroupTooSmall("every group needs at least `folds` rows",
                            group=bad, n_units=int(counts.min()), folds=folds)
    if counts.min() != counts.max():
        raise ValidationError("groups must share a common size for splitting",
                              smallest=int(counts.min()), largest=int(counts.max()))
    k, n = counts.size, int(counts[0])

    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(data.n_rows), gidx))
    fold_of_sorted = np.arange(data.n_rows) % n % folds

    out = []
    for f in range(folds):
        rows = order[fold_of_sorted == f]
        size_f = (n - f + folds - 1) // folds
        gi = gidx[rows]
        xm = np.empty((k, data.dim))
        for j in range(data.dim):
            xm[:, j] = np.bincount(gi, weights=data.x[rows, j], minlength=k)
        xm /= size_f
        ym = np.bincount(gi, weights=data.y[rows], minlength=k) / size_f
        out.append(MetaDataset.from_arrays(xm, ym, n_per=size_f, ids=list(uniq)))
    return out


def _conditional_draws(means: np.ndarray, noise: NoiseModel,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Simulated half-group means: v1 ~ N(mean, tau/n_per), v2 = 2*mean - v1.

    Half means are iid Gaussian around the latent effect with twice the
    full-mean variance; conditioning on their average equaling the observed
    mean leaves mean = observed and covariance tau/n_per.
    """
    factor = psd_sqrt(noise.mean_cov())
    z = rng.standard_normal(means.shape)
    v1 = means + z @ factor.T
    v2 = 2.0 * means - v1
    return v1, v2


def conditional_split(summary: GroupSummary, noise: NoiseModel,
                      seed) -> tuple[GroupSummary, GroupSummary]:
    """Simulate one group's half-group means from summary statistics.

    The two halves average back to the source means exactly up to one
    floating-point addition. The half group size is recorded as
    ``n_units // 2`` (floored for odd sizes).
    """
    if summary.dim != noise.dim:
        raise LengthMismatch("summary and noise model dimensions differ",
                             summary_dim=summary.dim, noise_dim=noise.dim)
    if summary.n_units != noise.n_per:
        raise ValidationError("summary and noise model group sizes differ",
                              summary_n=summary.n_units, noise_n=noise.n_per)
    rng = np.random.default_rng(seed)
    means = np.append(summary.x_mean, summary.y_mean)[None, :]
    v1, v2 = _conditional_draws(means, noise, rng)
    n_half = max(1, summary.n_units // 2)
    d = summary.dim
    mk = lambda v: GroupSummary(group_id=summary.group_id, n_units=n_half,
                                x_mean=v[:d], y_mean=float(v[d]),
                                is_control=summary.is_control)
    return mk(v1[0]), mk(v2[0])


def conditional_split_dataset(data: MetaDataset, noise: NoiseModel, seed) -> SplitPair:
    """Simulate half-group means for every group of a dataset at once."""
    _check_match(data, noise)
    rng = np.random.default_rng(seed)
    means = np.column_stack([data.x_matrix(), data.y_vector()])
    v1, v2 = _conditional_draws(means, noise, rng)
    n_half = max(1, data.n_per // 2)
    d = data.dim
    flags = [g.is_control for g in data.groups]
    mk = lambda v: MetaDataset.from_arrays(v[:, :d], v[:, d], n_per=n_half,
                                           ids=list(data.ids()), is_control=flags)
    return SplitPair(fold_a=mk(v1), fold_b=mk(v2))


def half_noise_model(noise: NoiseModel, n_per_full: int) -> NoiseModel:
    """Noise model for simulated half groups of a source with ``n_per_full``
    units: the recorded integer size is floor(n/2) and tau is rescaled so
    the implied group-mean covariance is exactly 2*tau/n_per_full.
    """
    n_half = max(1, n_per_full // 2)
    return NoiseModel(tau=noise.tau * (2.0 * n_half / n_per_full), n_per=n_half)


def ivcv_loss(train: MetaDataset, test: MetaDataset, noise_half: NoiseModel,
              q: float) -> float:
    """Held-out squared outcome error of the thresholded estimator.

    Fits on ``train`` at threshold ``q``, predicts every group's outcome
    from the train fold's unthresholded causal means, and sums the squared
    errors against the test fold's outcome means. ``noise_half`` must
    describe the train fold's actual group size, because the p-values must
    reflect the variance of the means that get thresholded.
    """
    if train.ids() != test.ids():
        raise ValidationError("train and test folds must hold the same groups in order")
    fit = regularized_iv(train, noise_half, q)
    pred = train.x_matrix() @ fit.beta
    resid = test.y_vector() - pred
    return float(resid @ resid)


def _union_folds(fold_sets: Sequence[MetaDataset], skip: int) -> MetaDataset:
    """Pool every fold except ``skip`` back into one dataset of means."""
    kept = [f for i, f in enumerate(fold_sets) if i != skip]
    if len(kept) == 1:
        return kept[0]
    ns = np.array([f.n_per for f in kept], dtype=float)
    x = sum(f.x_matrix() * n for f, n in zip(kept, ns)) / ns.sum()
    y = sum(f.y_vector() * n for f, n in zip(kept, ns)) / ns.sum()
    return MetaDataset.from_arrays(x, y, n_per=int(ns.sum()), ids=list(kept[0].ids()))


def _rotation_losses(fold_sets: Sequence[MetaDataset], make_noise: Callable[[int], NoiseModel],
                     grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Loss summed over leave-one-fold-out rotations, per grid threshold.

    A threshold is marked non-estimable when any rotation fails there; its
    summed loss would not be comparable to fully estimated thresholds.
    Returns (losses, min retained count, estimable flags).
    """
    n_q = grid.size
    total = np.zeros(n_q)
    ok = np.ones(n_q, dtype=bool)
    retained = np.full(n_q, np.iinfo(np.int64).max)
    for t in range(len(fold_sets)):
        test = fold_sets[t]
        train = _union_folds(fold_sets, skip=t)
        noise = make_noise(train.n_per)
        x, y = train.x_matrix(), train.y_vector()
        y_test = test.y_vector()
        _, pvals = null_p_values(x, noise)
        for j, (beta, r) in enumerate(_betas_over_grid(x, y, pvals, grid)):
            retained[j] = min(retained[j], r)
            if beta is None:
                ok[j] = False
                continue
            resid = y_test - x @ beta
            total[j] += float(resid @ resid)
    total[~ok] = np.nan
    return total, retained.astype(int), ok


def select_threshold(grid: np.ndarray, losses: np.ndarray, estimable: np.ndarray) -> float:
    """Smallest loss wins; exact ties resolve to the largest threshold
    (least regularization, most data retained).
    """
    best = None
    best_loss = np.inf
    for j in range(grid.size):
        if estimable[j] and losses[j] <= best_loss:
            best, best_loss = j, losses[j]
    if best is None:
        raise NoEstimableThreshold("no grid threshold produced an estimable fit")
    return float(grid[best])


def _check_fold_alignment(fold_sets: Sequence[MetaDataset]) -> None:
    ids = fold_sets[0].ids()
    for f in fold_sets[1:]:
        if f.ids() != ids:
            raise ValidationError("folds must hold the same groups in order")
        if f.dim != fold_sets[0].dim:
            raise LengthMismatch("folds must share dimension")


def ivcv_select(data, noise: NoiseModel, grid, folds: int = 2, seed=None) -> CvResult:
    """Select the threshold that minimizes cross-fold interventional loss.

    ``data`` may be raw unit rows (split here, seeded), a prebuilt
    ``SplitPair``, or a sequence of fold datasets. Each fold rotates through
    the test role with the remaining folds pooled for training; losses sum
    across rotations. ``noise`` carries the per-unit null covariance of the
    source groups; per-fold models are derived from it.
    """
    grid = _normalize_grid(grid)
    if isinstance(data, RawUnitData):
        if seed is None:
            raise BadParameters("a seed is required to split raw data")
        fold_sets = split_raw(data, folds, seed)
        total_n = sum(f.n_per for f in fold_sets)
        if noise.n_per != total_n:
            raise ValidationError("noise model n_per must equal the full group size",
                                  noise_n=noise.n_per, group_size=total_n)
        make_noise = lambda n: NoiseModel(tau=noise.tau, n_per=n)
    elif isinstance(data, SplitPair):
        fold_sets = [data.fold_a, data.fold_b]
        folds = 2
        make_noise = lambda n: NoiseModel(tau=noise.tau, n_per=n)
    else:
        fold_sets = list(data)
        if len(fold_sets) < 2:
            raise BadParameters("need at least two folds", folds=len(fold_sets))
        folds = len(fold_sets)
        make_noise = lambda n: NoiseModel(tau=noise.tau, n_per=n)
    _check_fold_alignment(fold_sets)
    losses, retained, ok = _rotation_losses(fold_sets, make_noise, grid)
    q = select_threshold(grid, losses, ok)
    return CvResult(grid=grid, losses=losses, selected_q=q, folds=folds,
                    groups_retained_at=retained, estimable=ok, n_splits=1)


def sivcv_select(data: MetaDataset, noise: NoiseModel, grid, folds: int = 2,
                 n_splits: int = 10, seed=None) -> CvResult:
    """Threshold selection from summary statistics alone.

    Each Monte Carlo repetition simulates a conditional half-group split for
    every group, computes the rotation-summed loss curve, and the curves are
    averaged across repetitions before selection. Repetitions draw from
    deterministic substreams of the master seed, so results do not depend on
    evaluation order. The returned ``selected_q`` is meant for one final
    ``regularized_iv`` call on the full, unsplit dataset.
    """
    grid = _normalize_grid(grid)
    if folds != 2:
        raise BadParameters("summary-statistic selection splits groups into halves; folds must be 2",
                            folds=folds)
    if not isinstance(n_splits, (int, np.integer)) or n_splits < 1:
        raise BadParameters("n_splits must be a positive integer", n_splits=n_splits)
    if seed is None:
        raise BadParameters("a seed is required for Monte Carlo splitting")
    _check_match(data, noise)

    fold_noise = half_noise_model(noise, data.n_per)
    make_noise = lambda n: NoiseModel(tau=fold_noise.tau, n_per=n)

    n_q = len(grid)
    acc = np.zeros(n_q)
    ok_all = np.ones(n_q, dtype=bool)
    retained = np.full(n_q, np.iinfo(np.int64).max)
    for child in _as_seedseq(seed).spawn(int(n_splits)):
        pair = conditional_split_dataset(data, noise, np.random.default_rng(child))
        losses_r, retained_r, ok_r = _rotation_losses([pair.fold_a, pair.fold_b],
                                                      make_noise, grid)
        ok_all &= ok_r
        retained = np.minimum(retained, retained_r)
        acc += np.where(ok_r, losses_r, 0.0)
    losses = np.where(ok_all, acc / n_splits, np.nan)
    q = select_threshold(grid, losses, ok_all)
    return CvResult(grid=grid, losses=losses, selected_q=q, folds=2,
                    groups_retained_at=retained.astype(int), estimable=ok_all,
                    n_splits=int(n_splits))
