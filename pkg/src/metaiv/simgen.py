"""Synthetic meta-analysis generation and the experiment drivers.

The structural model ties confounding directly to shared noise: the same
latent u that perturbs a group's causal means also enters its outcome mean
through the loading gamma. The per-unit null covariance implied by the
structural parameters is assembled analytically and returned with each
simulated dataset, so downstream thresholding and splitting never need to
re-estimate it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import invwishart

from .crossval import (
    RawUnitData,
    conditional_split_dataset,
    default_grid,
    group_means,
    half_noise_model,
    ivcv_select,
    sivcv_select,
    split_raw,
    _normalize_grid,
    _rotation_losses,
    select_threshold,
)
from .errors import (
    BadParameters,
    BadSpec,
    EstimationError,
    FileDimensionMismatch,
    LengthMismatch,
)
from .estimators import (
    _betas_over_grid,
    grouped_tsls,
    observational_ols,
    oracle_estimator,
    regularized_iv,
)
from .model import (
    FirstStageGen,
    FromFile,
    IndependentT,
    MetaDataset,
    NoiseModel,
    ScaleMixtureNormal,
    SimulationSpec,
    TwoComponentMixture,
    WishartT,
    psd_sqrt,
)
from .nulldist import null_p_values
from .tables import read_matrix_table


@dataclass(frozen=True, eq=False)
class SimOutput:
    """One simulated meta-analysis: summaries, the latent effects actually
    drawn, the exact noise model used, and optionally the raw unit rows."""

    dataset: MetaDataset
    zbar_true: np.ndarray
    noise: NoiseModel
    spec: SimulationSpec
    raw: RawUnitData | None = None


@dataclass(frozen=True)
class EstimatorSummary:
    mean: float
    sd: float
    n_ok: int
    n_failed: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "n_ok": self.n_ok,
                "n_failed": self.n_failed}


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """Causal-error summaries per estimator over seeded replications."""

    spec: SimulationSpec
    replications: int
    grid: np.ndarray
    estimators: Mapping[str, EstimatorSummary]
    path_curve: Mapping[float, EstimatorSummary] | None = None
    path_min: EstimatorSummary | None = None
    mean_selected_q: Mapping[str, float] | None = None

    def relative_to_ols(self) -> dict[str, float]:
        """mean causal error of each estimator divided by the observational
        baseline's; empty when the baseline was not run."""
        if "ols" not in self.estimators or not np.isfinite(self.estimators["ols"].mean):
            return {}
        base = self.estimators["ols"].mean
        return {name: s.mean / base for name, s in self.estimators.items()}

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "replications": self.replications,
            "grid": self.grid.tolist(),
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
            "path_curve": None if self.path_curve is None else
                {str(q): s.to_dict() for q, s in self.path_curve.items()},
            "path_min": None if self.path_min is None else self.path_min.to_dict(),
            "mean_selected_q": dict(self.mean_selected_q or {}),
        }


@dataclass(frozen=True, eq=False)
class LossCurves:
    """Aligned loss curves over one threshold grid, summed over the two
    fold rotations of a single split.

    ``estimable`` applies to the fitted curves (ivcv, causal, naive_cv);
    the first-stage curve needs no fit and is always finite.
    """

    grid: np.ndarray
    ivcv: np.ndarray
    causal: np.ndarray
    naive_cv: np.ndarray
    first_stage: np.ndarray
    estimable: np.ndarray


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_first_stage(gen: FirstStageGen, k: int, d: int, seed) -> np.ndarray:
    """Draw the k-by-d matrix of latent per-group effects."""
    if k < 1 or d < 1:
        raise BadParameters("k and d must be positive", k=k, d=d)
    rng = _as_rng(seed)

    if isinstance(gen, IndependentT):
        return rng.standard_t(gen.df, size=(k, d)) * gen.scale

    if isinstance(gen, WishartT):
        if gen.wishart_scale.shape[0] != d:
            raise BadParameters("wishart_scale dimension does not match d",
                                expected=d, got=gen.wishart_scale.shape[0])
        if gen.wishart_df <= d - 1:
            raise BadParameters("wishart_df must exceed d - 1",
                                wishart_df=gen.wishart_df, d=d)
        cov = invwishart.rvs(df=gen.wishart_df, scale=gen.wishart_scale,
                             random_state=rng)
        cov = np.atleast_2d(cov)
        # Scale so the drawn matrix is the row covariance, not the t shape.
        shape = cov * (gen.df_t - 2.0) / gen.df_t
        z = rng.standard_normal((k, d)) @ psd_sqrt(shape).T
        w = rng.chisquare(gen.df_t, size=k) / gen.df_t
        return z / np.sqrt(w)[:, None]

    if isinstance(gen, ScaleMixtureNormal):
        # 1/Gamma(shape, rate=scale) is inverse gamma with that shape/scale.
        sig2 = 1.0 / rng.gamma(gen.ig_shape, 1.0 / gen.ig_scale, size=k)
        return rng.standard_normal((k, d)) * np.sqrt(sig2)[:, None]

    if isinstance(gen, TwoComponentMixture):
        var = np.where(rng.random(k) < gen.p_weak, gen.sigma_weak, gen.sigma_strong)
        return rng.standard_normal((k, d)) * np.sqrt(var)[:, None]

    if isinstance(gen, FromFile):
        rows = read_matrix_table(gen.path)
        if rows.shape[1] != d:
            raise FileDimensionMismatch("effect table has the wrong row length",
                                        path=gen.path, expected=d, got=rows.shape[1])
        if rows.shape[0] < k:
            raise BadParameters("effect table has fewer rows than k_groups",
                                path=gen.path, rows=rows.shape[0], k=k)
        if rows.shape[0] == k:
            return rows
        pick = np.sort(rng.choice(rows.shape[0], size=k, replace=False))
        return rows[pick]

    raise BadParameters(f"unknown first-stage generator {type(gen).__name__}")


def analytic_tau(spec: SimulationSpec) -> np.ndarray:
    """Per-unit covariance of the stacked (X, Y) noise implied by the
    structural parameters, i.e. of (u psi + eps, (u psi + eps) beta + u g)."""
    g = spec.gamma_rowsum()
    a = spec.psi.T @ spec.sigma_u @ spec.psi + spec.sigma_eps_x
    cross = a @ spec.beta_true + spec.psi.T @ spec.sigma_u @ g
    yy = (spec.beta_true @ a @ spec.beta_true
          + 2.0 * spec.beta_true @ spec.psi.T @ spec.sigma_u @ g
          + g @ spec.sigma_u @ g)
    d = spec.dim
    tau = np.empty((d + 1, d + 1))
    tau[:d, :d] = (a + a.T) / 2.0
    tau[:d, d] = cross
    tau[d, :d] = cross
    tau[d, d] = yy
    return tau


def simulate_meta(spec: SimulationSpec, include_raw: bool = False) -> SimOutput:
    """Simulate one meta-analysis from a spec.

    Latent effects come from the spec's first-stage generator; control
    groups (``spec.n_controls`` of them) are appended with zero latent
    effect and flagged. With ``include_raw`` the unit rows are materialized
    and the summary dataset is computed from them, so summaries and raw data
    describe the same sample; the latent draw is unaffected by the flag.
    """
    ss = np.random.SeedSequence(spec.seed)
    s_first, s_noise = ss.spawn(2)

    k, d, n = spec.k_groups, spec.dim, spec.n_per
    zbar = gen_first_stage(spec.firststage, k, d, np.random.default_rng(s_first))
    if spec.n_controls:
        zbar = np.vstack([zbar, np.zeros((spec.n_controls, d))])
    k_all = zbar.shape[0]
    ids = [f"g{i}" for i in range(k)] + [f"c{i}" for i in range(spec.n_controls)]
    flags = [False] * k + [True] * spec.n_controls

    g = spec.gamma_rowsum()
    l_u = psd_sqrt(spec.sigma_u)
    has_eps = bool(np.any(spec.sigma_eps_x))
    l_e = psd_sqrt(spec.sigma_eps_x) if has_eps else None
    rng = np.random.default_rng(s_noise)

    tau = analytic_tau(spec)
    noise = NoiseModel(tau=tau, n_per=n)

    if include_raw:
        rows = k_all * n
        u = rng.standard_normal((rows, d)) @ l_u.T
        x = np.repeat(zbar, n, axis=0) + u @ spec.psi
        if has_eps:
            x = x + rng.standard_normal((rows, d)) @ l_e.T
        y = x @ spec.beta_true + u @ g
        gids = np.repeat(np.array(ids, dtype=object), n)
        raw = RawUnitData(x=x, y=y, group_ids=gids)
        dataset = group_means(raw, is_control=flags)
        return SimOutput(dataset=dataset, zbar_true=zbar, noise=noise,
                         spec=spec, raw=raw)

    ubar = rng.standard_normal((k_all, d)) @ l_u.T / np.sqrt(n)
    xbar = zbar + ubar @ spec.psi
    if has_eps:
        xbar = xbar + rng.standard_normal((k_all, d)) @ l_e.T / np.sqrt(n)
    ybar = xbar @ spec.beta_true + ubar @ g
    dataset = MetaDataset.from_arrays(xbar, ybar, n_per=n, ids=ids, is_control=flags)
    return SimOutput(dataset=dataset, zbar_true=zbar, noise=noise, spec=spec)


def causal_mse(beta_hat, beta_true) -> float:
    """Squared Euclidean error of an effect estimate: the expected risk of
    intervening on one causal variable at random."""
    a = np.asarray(beta_hat, dtype=float)
    b = np.asarray(beta_true, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch("effect vectors must share one length",
                             got=a.shape, expected=b.shape)
    diff = a - b
    return float(diff @ diff)


def baseline_losses(sim: SimOutput, grid=None, seed=None) -> LossCurves:
    """The four aligned loss curves of one split of one simulation.

    Per threshold, summed over both fold rotations: the cross-fold
    interventional loss, the naive held-out outcome loss (predicting with
    the test fold's own means), the first-stage loss of the thresholded
    mean predictor, and the true causal error of the fold-trained estimate.
    Splits use raw rows when the simulation carries them, otherwise
    simulated conditional half-groups.
    """
    grid = default_grid() if grid is None else _normalize_grid(grid)
    if seed is None:
        raise BadParameters("a seed is required to split the simulation")
    tau = sim.noise.tau
    if sim.raw is not None:
        fold_sets = split_raw(sim.raw, 2, seed)
        make_noise = lambda m: NoiseModel(tau=tau, n_per=m)
    else:
        pair = conditional_split_dataset(sim.dataset, sim.noise, seed)
        fold_sets = [pair.fold_a, pair.fold_b]
        fold_noise = half_noise_model(sim.noise, sim.dataset.n_per)
        make_noise = lambda m: NoiseModel(tau=fold_noise.tau, n_per=m)

    beta_true = sim.spec.beta_true
    n_q = grid.size
    ivcv = np.zeros(n_q)
    naive = np.zeros(n_q)
    first = np.zeros(n_q)
    causal = np.zeros(n_q)
    ok = np.ones(n_q, dtype=bool)
    for t in (0, 1):
        train, test = fold_sets[1 - t], fold_sets[t]
        noise = make_noise(train.n_per)
        x, y = train.x_matrix(), train.y_vector()
        xt, yt = test.x_matrix(), test.y_vector()
        _, pvals = null_p_values(x, noise)
        fits = _betas_over_grid(x, y, pvals, grid)
        for j, (beta, _) in enumerate(fits):
            kept = (pvals < grid[j])[:, None]
            first[j] += float(((xt - np.where(kept, x, 0.0)) ** 2).sum())
            if beta is None:
                ok[j] = False
                continue
            r_cv = yt - x @ beta
            ivcv[j] += float(r_cv @ r_cv)
            r_naive = yt - xt @ beta
            naive[j] += float(r_naive @ r_naive)
            causal[j] += causal_mse(beta, beta_true)
    for arr in (ivcv, naive, causal):
        arr[~ok] = np.nan
    return LossCurves(grid=grid, ivcv=ivcv, causal=causal, naive_cv=naive,
                      first_stage=first, estimable=ok)


KNOWN_ESTIMATORS = ("ols", "tsls", "path", "ivcv", "sivcv", "oracle")


def _seed_int(child: np.random.SeedSequence) -> int:
    return int(child.generate_state(1, np.uint64)[0])


def _summarize(values: np.ndarray) -> EstimatorSummary:
    ok = np.isfinite(values)
    n_ok = int(ok.sum())
    if n_ok == 0:
        return EstimatorSummary(mean=float("nan"), sd=float("nan"),
                                n_ok=0, n_failed=int(values.size))
    sd = float(np.std(values[ok], ddof=1)) if n_ok > 1 else 0.0
    return EstimatorSummary(mean=float(np.mean(values[ok])), sd=sd,
                            n_ok=n_ok, n_failed=int(values.size - n_ok))


def run_experiment(spec: SimulationSpec, grid=None, replications: int = 1,
                   estimators: Sequence[str] = ("tsls", "ivcv", "oracle"),
                   seed=None, n_splits: int = 10, folds: int = 2) -> ExperimentReport:
    """Replicate a simulation and score each requested estimator's causal
    error; per-replication estimation failures are recorded, not fatal.

    Each replication runs on its own deterministic substream of the master
    seed, so results do not depend on execution order. Raw unit rows are
    materialized only when an estimator needs them (unit-level OLS, raw
    cross-validation).
    """
    grid = default_grid() if grid is None else _normalize_grid(grid)
    if seed is None:
        raise BadParameters("a seed is required")
    if replications < 1:
        raise BadParameters("replications must be positive", replications=replications)
    unknown = set(estimators) - set(KNOWN_ESTIMATORS)
    if unknown:
        raise BadParameters("unknown estimator names", names=sorted(unknown))
    estimators = tuple(estimators)
    needs_raw = "ols" in estimators or "ivcv" in estimators

    reps = int(replications)
    mse = {name: np.full(reps, np.nan) for name in estimators}
    sel_q = {name: np.full(reps, np.nan) for name in ("ivcv", "sivcv") if name in estimators}
    n_q = grid.size
    path_mse = np.full((reps, n_q), np.nan) if "path" in estimators else None

    for r, child in enumerate(np.random.SeedSequence(seed).spawn(reps)):
        s_sim, s_ivcv, s_sivcv = child.spawn(3)
        spec_r = replace(spec, seed=_seed_int(s_sim))
        sim = simulate_meta(spec_r, include_raw=needs_raw)
        beta_true = spec.beta_true
        data, noise = sim.dataset, sim.noise

        if "tsls" in estimators:
            try:
                mse["tsls"][r] = causal_mse(grouped_tsls(data).beta, beta_true)
            except EstimationError:
                pass
        if "ols" in estimators:
            try:
                mse["ols"][r] = causal_mse(observational_ols(sim.raw.x, sim.raw.y), beta_true)
            except EstimationError:
                pass
        if "oracle" in estimators:
            try:
                mse["oracle"][r] = causal_mse(
                    oracle_estimator(sim.zbar_true, data.y_vector()), beta_true)
            except EstimationError:
                pass
        if "path" in estimators:
            x, y = data.x_matrix(), data.y_vector()
            _, pvals = null_p_values(x, noise)
            for j, (beta, _) in enumerate(_betas_over_grid(x, y, pvals, grid)):
                if beta is not None:
                    path_mse[r, j] = causal_mse(beta, beta_true)
        if "ivcv" in estimators:
            try:
                res = ivcv_select(sim.raw, noise, grid, folds=folds,
                                  seed=np.random.default_rng(s_ivcv))
                fit = regularized_iv(data, noise, res.selected_q)
                mse["ivcv"][r] = causal_mse(fit.beta, beta_true)
                sel_q["ivcv"][r] = res.selected_q
            except EstimationError:
                pass
        if "sivcv" in estimators:
            try:
                res = sivcv_select(data, noise, grid, folds=2,
                                   n_splits=n_splits, seed=s_sivcv)
                fit = regularized_iv(data, noise, res.selected_q)
                mse["sivcv"][r] = causal_mse(fit.beta, beta_true)
                sel_q["sivcv"][r] = res.selected_q
            except EstimationError:
                pass

    summaries = {name: _summarize(vals) for name, vals in mse.items() if name != "path"}
    path_curve = None
    path_min = None
    if path_mse is not None:
        path_curve = {float(q): _summarize(path_mse[:, j]) for j, q in enumerate(grid)}
        any_ok = np.isfinite(path_mse).any(axis=1)
        per_rep_min = np.full(reps, np.nan)
        if any_ok.any():
            per_rep_min[any_ok] = np.nanmin(path_mse[any_ok], axis=1)
        path_min = _summarize(per_rep_min)
    mean_sel = {name: float(np.nanmean(vals)) for name, vals in sel_q.items()
                if np.isfinite(vals).any()}
    return ExperimentReport(spec=spec, replications=reps, grid=grid,
                            estimators=summaries, path_curve=path_curve,
                            path_min=path_min, mean_selected_q=mean_sel)
