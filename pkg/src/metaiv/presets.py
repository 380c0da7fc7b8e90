"""Named experiment presets and their drivers.

Each preset fixes a synthetic data-generating design and a driver that
replicates it under seeded substreams and aggregates causal-error results.
The ``fig1`` preset produces the four aligned loss curves of the scalar
design; the others produce per-estimator causal-error reports, including a
group-count sweep and the independent-vs-correlated tails contrast.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .crossval import default_grid, select_threshold, _normalize_grid
from .errors import BadParameters
from .model import (
    IndependentT,
    ScaleMixtureNormal,
    SimulationSpec,
    WishartT,
)
from .simgen import (
    ExperimentReport,
    LossCurves,
    _seed_int,
    baseline_losses,
    run_experiment,
    simulate_meta,
)

# Default replication counts per preset; overridable from the drivers.
DEFAULT_REPLICATIONS = {
    "fig1": 500,
    "fig3a": 200,
    "fig3b": 100,
    "fig4-independent": 200,
    "fig4-wishart": 200,
    "fig4-scalemix": 200,
}

# First-stage scales for the multivariate designs. Chosen so the latent
# effect variance per coordinate sits well below the group-mean noise scale
# times the tail factor: weak enough that unregularized TSLS stays biased,
# heavy-tailed enough that hard thresholding can isolate strong groups.
SCALE_D7 = 0.13
SCALE_D4 = 0.13
T_DF = 3.0

FIG3B_K_VALUES = (25, 50, 100, 400, 798)


def _alternating_gamma(d: int) -> np.ndarray:
    return np.diag([1.0 if j % 2 == 0 else -1.0 for j in range(d)])


def _scalemix_for_t(df: float, scale: float) -> ScaleMixtureNormal:
    # Inverse-gamma(df/2, (df/2) s^2) row variances make each marginal a
    # scaled t(df, s): the normal scale-mixture representation of the t.
    return ScaleMixtureNormal(ig_shape=df / 2.0, ig_scale=(df / 2.0) * scale**2)


def fig1_spec(seed: int) -> SimulationSpec:
    """Scalar design: heavy-tailed latent effects, strong confounding."""
    return SimulationSpec(
        dim=1, k_groups=2500, n_per=100, seed=seed,
        firststage=IndependentT(df=T_DF, scale=0.4),
        beta_true=np.array([1.0]),
        gamma=np.array([[10.0]]),
        sigma_u=np.array([[1.0]]),
    )


def fig3_spec(seed: int, k_groups: int = 798) -> SimulationSpec:
    """Seven correlated-tail coordinates, alternating confounding signs."""
    d = 7
    return SimulationSpec(
        dim=d, k_groups=k_groups, n_per=100, seed=seed,
        firststage=_scalemix_for_t(T_DF, SCALE_D7),
        beta_true=np.ones(d),
        gamma=_alternating_gamma(d),
        sigma_u=np.eye(d),
    )


def fig4_spec(kind: str, seed: int, k_groups: int = 798) -> SimulationSpec:
    """Four-dimensional variants differing only in the first-stage tails."""
    d = 4
    if kind == "independent":
        firststage = IndependentT(df=T_DF, scale=SCALE_D4)
    elif kind == "scalemix":
        firststage = _scalemix_for_t(T_DF, SCALE_D4)
    elif kind == "wishart":
        # Inverse-Wishart mean scale/(df - d - 1) matched to SCALE_D4^2 I.
        wdf = 10.0 * d
        wscale = (wdf - d - 1.0) * SCALE_D4**2 * np.eye(d)
        firststage = WishartT(df_t=T_DF, wishart_df=wdf, wishart_scale=wscale)
    else:
        raise BadParameters("unknown fig4 variant", kind=kind)
    return SimulationSpec(
        dim=d, k_groups=k_groups, n_per=100, seed=seed,
        firststage=firststage,
        beta_true=np.ones(d),
        gamma=_alternating_gamma(d),
        sigma_u=np.eye(d),
    )


@dataclass(frozen=True, eq=False)
class CurveStudy:
    """Replicated loss curves: per-replication values and their means."""

    grid: np.ndarray
    replications: int
    curves: Mapping[str, np.ndarray]        # name -> (reps, n_q), NaN where not estimable
    mean_curves: Mapping[str, np.ndarray]   # name -> (n_q,)
    selected_index: np.ndarray              # per-replication argmin of the ivcv curve
    causal_at_selected: np.ndarray
    causal_min: np.ndarray

    def argmin_index(self, name: str) -> int:
        curve = self.mean_curves[name]
        return int(np.nanargmin(curve))

    def correlation_with_causal(self, name: str) -> float:
        a, b = self.mean_curves[name], self.mean_curves["causal"]
        ok = np.isfinite(a) & np.isfinite(b)
        return float(np.corrcoef(a[ok], b[ok])[0, 1])


def run_curve_study(spec: SimulationSpec, replications: int, seed,
                    grid=None) -> CurveStudy:
    """Replicate one design and collect all four loss curves per split.

    Summary-only simulation with conditional half-group splits: for the
    Gaussian structural model the simulated split has exactly the raw
    split's distribution, at a fraction of the cost.
    """
    grid = default_grid() if grid is None else _normalize_grid(grid)
    reps = int(replications)
    if reps < 1:
        raise BadParameters("replications must be positive", replications=reps)
    names = ("ivcv", "causal", "naive_cv", "first_stage")
    store = {name: np.full((reps, grid.size), np.nan) for name in names}
    sel = np.full(reps, -1, dtype=int)
    causal_sel = np.full(reps, np.nan)
    causal_min = np.full(reps, np.nan)
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(reps)):
        s_sim, s_split = child.spawn(2)
        sim = simulate_meta(replace(spec, seed=_seed_int(s_sim)))
        curves: LossCurves = baseline_losses(sim, grid, seed=np.random.default_rng(s_split))
        store["ivcv"][r] = curves.ivcv
        store["causal"][r] = curves.causal
        store["naive_cv"][r] = curves.naive_cv
        store["first_stage"][r] = curves.first_stage
        q_star = select_threshold(grid, curves.ivcv, curves.estimable)
        j = int(np.flatnonzero(grid == q_star)[0])
        sel[r] = j
        causal_sel[r] = curves.causal[j]
        if curves.estimable.any():
            causal_min[r] = np.nanmin(curves.causal)
    mean_curves = {name: np.nanmean(vals, axis=0) for name, vals in store.items()}
    return CurveStudy(grid=grid, replications=reps, curves=store,
                      mean_curves=mean_curves, selected_index=sel,
                      causal_at_selected=causal_sel, causal_min=causal_min)


def run_fig1(replications: int, seed, grid=None) -> CurveStudy:
    return run_curve_study(fig1_spec(0), replications, seed, grid)


def run_fig3a(replications: int, seed, grid=None,
              estimators: Sequence[str] = ("ols", "tsls", "path", "ivcv", "sivcv", "oracle"),
              k_groups: int = 798) -> ExperimentReport:
    return run_experiment(fig3_spec(0, k_groups=k_groups), grid=grid,
                          replications=replications, estimators=estimators,
                          seed=seed)


def run_fig3b(replications: int, seed, grid=None,
              k_values: Sequence[int] = FIG3B_K_VALUES) -> dict[int, ExperimentReport]:
    """Sweep the number of groups; one report per K."""
    out = {}
    children = np.random.SeedSequence(seed).spawn(len(k_values))
    for k, child in zip(k_values, children):
        out[int(k)] = run_experiment(fig3_spec(0, k_groups=int(k)), grid=grid,
                                     replications=replications,
                                     estimators=("tsls", "ivcv", "oracle"),
                                     seed=child)
    return out


def run_fig4(kind: str, replications: int, seed, grid=None) -> ExperimentReport:
    return run_experiment(fig4_spec(kind, 0), grid=grid,
                          replications=replications,
                          estimators=("tsls", "ivcv", "oracle"), seed=seed)


PRESET_NAMES = ("fig1", "fig3a", "fig3b", "fig4-independent", "fig4-wishart",
                "fig4-scalemix")


def preset_spec(name: str, seed: int = 0):
    """The simulation spec behind a preset (fig3b returns its largest K)."""
    if name == "fig1":
        return fig1_spec(seed)
    if name == "fig3a":
        return fig3_spec(seed)
    if name == "fig3b":
        return fig3_spec(seed, k_groups=max(FIG3B_K_VALUES))
    if name.startswith("fig4-"):
        return fig4_spec(name.split("-", 1)[1], seed)
    raise BadParameters("unknown preset", preset=name, known=PRESET_NAMES)


def run_preset(name: str, replications: int | None, seed, grid=None):
    """Dispatch a preset run; returns (kind, result) where kind is
    ``curves`` for fig1 and ``reports`` otherwise."""
    if name not in PRESET_NAMES:
        raise BadParameters("unknown preset", preset=name, known=PRESET_NAMES)
    reps = DEFAULT_REPLICATIONS[name] if replications is None else int(replications)
    if name == "fig1":
        return "curves", run_fig1(reps, seed, grid)
    if name == "fig3a":
        return "reports", {798: run_fig3a(reps, seed, grid)}
    if name == "fig3b":
        return "reports", run_fig3b(reps, seed, grid)
    kind = name.split("-", 1)[1]
    return "reports", {798: run_fig4(kind, reps, seed, grid)}
