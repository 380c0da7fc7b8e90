"""Value types shared across the package.

Everything here is an immutable value object: construction validates, and
after that instances can be shared freely across threads and worker
processes. Each type round-trips through ``to_dict``/``from_dict`` (and
JSON) with bit-identical field values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import BadParameters, BadSpec, ValidationError

# Covariance inputs must be symmetric to this relative tolerance and may not
# have eigenvalues below -1e-10 times their trace.
SYMMETRY_RTOL = 1e-10
EIGENVALUE_RTOL = 1e-10


def _frozen_array(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


def check_covariance(name: str, a, dim: int | None = None, err=ValidationError) -> np.ndarray:
    """Validate a symmetric PSD matrix and return a symmetrized copy."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise err(f"{name} must be a square matrix", shape=a.shape)
    if dim is not None and a.shape[0] != dim:
        raise err(f"{name} has the wrong dimension", expected=dim, got=a.shape[0])
    if not np.all(np.isfinite(a)):
        raise err(f"{name} contains non-finite entries")
    scale = float(np.abs(a).max()) if a.size else 0.0
    if a.size and float(np.abs(a - a.T).max()) > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise err(f"{name} is not symmetric within relative tolerance {SYMMETRY_RTOL}")
    sym = (a + a.T) / 2.0
    eigs = np.linalg.eigvalsh(sym)
    floor = -EIGENVALUE_RTOL * max(float(np.trace(sym)), 0.0)
    if eigs.size and float(eigs.min()) < floor:
        raise err(
            f"{name} is not positive semidefinite",
            min_eigenvalue=float(eigs.min()),
        )
    return sym


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """A factor L with L L' = a, tolerant of semidefinite (singular) inputs."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh((a + a.T) / 2.0)
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class GroupSummary:
    """Sample means of one experimental group.

    ``x_mean`` holds the d causal-variable means, ``y_mean`` the outcome
    mean, over the group's ``n_units`` units.
    """

    group_id: str | int
    n_units: int
    x_mean: np.ndarray
    y_mean: float
    is_control: bool = False

    def __post_init__(self):
        if not isinstance(self.n_units, (int, np.integer)) or self.n_units < 1:
            raise ValidationError("n_units must be a positive integer",
                                  group=self.group_id, n_units=self.n_units)
        x = np.asarray(self.x_mean, dtype=float)
        if x.ndim != 1 or x.size < 1:
            raise ValidationError("x_mean must be a nonempty vector", group=self.group_id)
        if not np.all(np.isfinite(x)):
            raise ValidationError("x_mean contains non-finite values", group=self.group_id)
        y = float(self.y_mean)
        if not np.isfinite(y):
            raise ValidationError("y_mean is not finite", group=self.group_id)
        object.__setattr__(self, "n_units", int(self.n_units))
        object.__setattr__(self, "x_mean", _frozen_array(x))
        object.__setattr__(self, "y_mean", y)
        object.__setattr__(self, "is_control", bool(self.is_control))

    @property
    def dim(self) -> int:
        return self.x_mean.size

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "n_units": self.n_units,
            "x_mean": self.x_mean.tolist(),
            "y_mean": self.y_mean,
            "is_control": self.is_control,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSummary":
        return cls(group_id=d["group_id"], n_units=d["n_units"],
                   x_mean=np.asarray(d["x_mean"], dtype=float),
                   y_mean=d["y_mean"], is_control=d["is_control"])


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """An ordered collection of group summaries with a common dimension and
    a common group size ``n_per``.

    Mixed dimensions or mixed group sizes are rejected at construction: the
    equal-weight second stage assumes every group mean carries the same
    noise variance.
    """

    groups: tuple[GroupSummary, ...]
    dim: int
    n_per: int

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise ValidationError("a dataset needs at least one group")
        object.__setattr__(self, "groups", groups)
        for g in groups:
            if g.dim != self.dim:
                raise ValidationError("mixed x dimensions in dataset",
                                      group=g.group_id, expected=self.dim, got=g.dim)
            if g.n_units != self.n_per:
                raise ValidationError("mixed group sizes in dataset",
                                      group=g.group_id, expected=self.n_per, got=g.n_units)
        ids = [g.group_id for g in groups]
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise ValidationError("duplicate group_id in dataset", group=dup)

    @classmethod
    def from_groups(cls, groups: Iterable[GroupSummary]) -> "MetaDataset":
        groups = tuple(groups)
        if not groups:
            raise ValidationError("a dataset needs at least one group")
        return cls(groups=groups, dim=groups[0].dim, n_per=groups[0].n_units)

    @classmethod
    def from_arrays(cls, x, y, n_per: int, ids: Sequence | None = None,
                    is_control: Sequence[bool] | None = None) -> "MetaDataset":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValidationError("x must be (k, d) and y must be (k,)",
                                  x_shape=x.shape, y_shape=y.shape)
        k = x.shape[0]
        if ids is None:
            ids = [f"g{i}" for i in range(k)]
        if is_control is None:
            is_control = [False] * k
        groups = tuple(
            GroupSummary(group_id=ids[i], n_units=n_per, x_mean=x[i],
                         y_mean=float(y[i]), is_control=bool(is_control[i]))
            for i in range(k)
        )
        return cls(groups=groups, dim=x.shape[1], n_per=int(n_per))

    @property
    def k(self) -> int:
        return len(self.groups)

    def ids(self) -> tuple:
        return tuple(g.group_id for g in self.groups)

    def x_matrix(self) -> np.ndarray:
        return np.array([g.x_mean for g in self.groups])

    def y_vector(self) -> np.ndarray:
        return np.array([g.y_mean for g in self.groups])

    def control_groups(self) -> tuple[GroupSummary, ...]:
        return tuple(g for g in self.groups if g.is_control)

    def with_x(self, new_x: np.ndarray) -> "MetaDataset":
        """Same groups, ids, sizes, and outcomes, with replaced x means."""
        new_x = np.asarray(new_x, dtype=float)
        if new_x.shape != (self.k, self.dim):
            raise ValidationError("replacement x has the wrong shape",
                                  expected=(self.k, self.dim), got=new_x.shape)
        groups = tuple(
            GroupSummary(group_id=g.group_id, n_units=g.n_units, x_mean=new_x[i],
                         y_mean=g.y_mean, is_control=g.is_control)
            for i, g in enumerate(self.groups)
        )
        return MetaDataset(groups=groups, dim=self.dim, n_per=self.n_per)

    def to_dict(self) -> dict:
        return {
            "groups": [g.to_dict() for g in self.groups],
            "dim": self.dim,
            "n_per": self.n_per,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaDataset":
        return cls(groups=tuple(GroupSummary.from_dict(g) for g in d["groups"]),
                   dim=d["dim"], n_per=d["n_per"])


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Per-unit covariance of the stacked vector (X, Y) under the
    no-intervention null, together with the group size ``n_per``.

    The covariance of a group mean under the null is ``tau / n_per``.
    """

    tau: np.ndarray
    n_per: int

    def __post_init__(self):
        tau = check_covariance("tau", self.tau)
        if tau.shape[0] < 2:
            raise ValidationError("tau must cover at least one causal variable plus the outcome",
                                  shape=tau.shape)
        if not isinstance(self.n_per, (int, np.integer)) or self.n_per < 1:
            raise ValidationError("n_per must be a positive integer", n_per=self.n_per)
        object.__setattr__(self, "tau", _frozen_array(tau))
        object.__setattr__(self, "n_per", int(self.n_per))

    @property
    def dim(self) -> int:
        return self.tau.shape[0] - 1

    @property
    def tau_xx(self) -> np.ndarray:
        return self.tau[: self.dim, : self.dim]

    def mean_cov(self) -> np.ndarray:
        return self.tau / self.n_per

    def to_dict(self) -> dict:
        return {"tau": self.tau.tolist(), "n_per": self.n_per}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(tau=np.asarray(d["tau"], dtype=float), n_per=d["n_per"])


@dataclass(frozen=True, eq=False)
class RegularizedEstimate:
    """A fitted causal-effect vector with thresholding diagnostics."""

    beta: np.ndarray
    q: float
    groups_retained: int
    condition_number: float
    xtx_rank: int

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValidationError("beta must be a finite vector")
        q = float(self.q)
        if not (0.0 < q <= 1.0):
            raise ValidationError("q must lie in (0, 1]", q=q)
        if int(self.groups_retained) < beta.size:
            raise ValidationError("an estimate needs at least dim retained groups",
                                  retained=self.groups_retained, dim=beta.size)
        object.__setattr__(self, "beta", _frozen_array(beta))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "groups_retained", int(self.groups_retained))
        object.__setattr__(self, "condition_number", float(self.condition_number))
        object.__setattr__(self, "xtx_rank", int(self.xtx_rank))

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "q": self.q,
            "groups_retained": self.groups_retained,
            "condition_number": self.condition_number,
            "xtx_rank": self.xtx_rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizedEstimate":
        return cls(beta=np.asarray(d["beta"], dtype=float), q=d["q"],
                   groups_retained=d["groups_retained"],
                   condition_number=d["condition_number"], xtx_rank=d["xtx_rank"])


# First-stage generators: the distribution of the latent per-group effects.

@dataclass(frozen=True)
class IndependentT:
    """iid scaled Student-t entries; heavy axis-aligned tails."""

    df: float
    scale: float

    def __post_init__(self):
        if not (self.df > 0 and np.isfinite(self.df)):
            raise BadParameters("df must be positive", df=self.df)
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise BadParameters("scale must be positive", scale=self.scale)


@dataclass(frozen=True, eq=False)
class WishartT:
    """Rows are multivariate t with a covariance matrix drawn once per
    dataset from an inverse Wishart. Extremes correlate across coordinates
    through the shared covariance.
    """

    df_t: float
    wishart_df: float
    wishart_scale: np.ndarray

    def __post_init__(self):
        if not (self.df_t > 2 and np.isfinite(self.df_t)):
            # The draw is scaled to make the sampled matrix the t covariance,
            # which only exists for more than 2 degrees of freedom.
            raise BadParameters("df_t must exceed 2", df_t=self.df_t)
        if not (self.wishart_df > 0 and np.isfinite(self.wishart_df)):
            raise BadParameters("wishart_df must be positive", wishart_df=self.wishart_df)
        scale = check_covariance("wishart_scale", self.wishart_scale, err=BadParameters)
        object.__setattr__(self, "wishart_scale", _frozen_array(scale))

    def to_dict(self) -> dict:
        return {"kind": "wishart_t", "df_t": self.df_t, "wishart_df": self.wishart_df,
                "wishart_scale": self.wishart_scale.tolist()}


@dataclass(frozen=True)
class ScaleMixtureNormal:
    """Each row is Gaussian with a row-specific variance drawn from an
    inverse gamma, so one extreme coordinate predicts extremes in all
    others. Marginals are scaled t with df = 2 * ig_shape.
    """

    ig_shape: float
    ig_scale: float

    def __post_init__(self):
        if not (self.ig_shape > 0 and np.isfinite(self.ig_shape)):
            raise BadParameters("ig_shape must be positive", ig_shape=self.ig_shape)
        if not (self.ig_scale > 0 and np.isfinite(self.ig_scale)):
            raise BadParameters("ig_scale must be positive", ig_scale=self.ig_scale)


@dataclass(frozen=True)
class TwoComponentMixture:
    """Rows Gaussian with variance sigma_weak (probability p_weak) or
    sigma_strong; both are variances, not standard deviations.
    """

    p_weak: float
    sigma_weak: float
    sigma_strong: float

    def __post_init__(self):
        if not (0.0 <= self.p_weak <= 1.0):
            raise BadParameters("p_weak must be a probability", p_weak=self.p_weak)
        if not (self.sigma_weak > 0 and np.isfinite(self.sigma_weak)):
            raise BadParameters("sigma_weak must be positive", sigma_weak=self.sigma_weak)
        if not (self.sigma_strong > 0 and np.isfinite(self.sigma_strong)):
            raise BadParameters("sigma_strong must be positive", sigma_strong=self.sigma_strong)


@dataclass(frozen=True)
class FromFile:
    """Latent effects loaded verbatim from a table of row vectors."""

    path: str

    def __post_init__(self):
        if not isinstance(self.path, str) or not self.path:
            raise BadParameters("path must be a nonempty string")


FirstStageGen = Union[IndependentT, WishartT, ScaleMixtureNormal, TwoComponentMixture, FromFile]

_GEN_KINDS = {
    "independent_t": IndependentT,
    "wishart_t": WishartT,
    "scale_mixture_normal": ScaleMixtureNormal,
    "two_component_mixture": TwoComponentMixture,
    "from_file": FromFile,
}


def firststage_to_dict(gen: FirstStageGen) -> dict:
    if isinstance(gen, IndependentT):
        return {"kind": "independent_t", "df": gen.df, "scale": gen.scale}
    if isinstance(gen, WishartT):
        return gen.to_dict()
    if isinstance(gen, ScaleMixtureNormal):
        return {"kind": "scale_mixture_normal", "ig_shape": gen.ig_shape, "ig_scale": gen.ig_scale}
    if isinstance(gen, TwoComponentMixture):
        return {"kind": "two_component_mixture", "p_weak": gen.p_weak,
                "sigma_weak": gen.sigma_weak, "sigma_strong": gen.sigma_strong}
    if isinstance(gen, FromFile):
        return {"kind": "from_file", "path": gen.path}
    raise BadParameters(f"unknown first-stage generator {type(gen).__name__}")


def firststage_from_dict(d: dict) -> FirstStageGen:
    kind = d.get("kind")
    if kind not in _GEN_KINDS:
        raise BadParameters("unknown first-stage generator kind", kind=kind)
    args = {k: v for k, v in d.items() if k != "kind"}
    if kind == "wishart_t":
        args["wishart_scale"] = np.asarray(args["wishart_scale"], dtype=float)
    return _GEN_KINDS[kind](**args)


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    """Full description of one synthetic meta-analysis.

    The structural model is, per unit, x = zbar + u psi + eps_x and
    y = x beta + u gamma_rowsum, with u ~ N(0, sigma_u) and
    eps_x ~ N(0, sigma_eps_x) independent across units. Group means carry
    the same structure with covariances shrunk by n_per.
    """

    dim: int
    k_groups: int
    n_per: int
    seed: int
    firststage: FirstStageGen
    beta_true: np.ndarray
    gamma: np.ndarray
    sigma_u: np.ndarray
    psi: np.ndarray | None = None
    sigma_eps_x: np.ndarray | None = None
    n_controls: int = 0

    def __post_init__(self):
        d = self.dim
        if not isinstance(d, (int, np.integer)) or d < 1:
            raise BadSpec("dim must be a positive integer", dim=d)
        if not isinstance(self.k_groups, (int, np.integer)) or self.k_groups < 1:
            raise BadSpec("k_groups must be a positive integer", k_groups=self.k_groups)
        if not isinstance(self.n_per, (int, np.integer)) or self.n_per < 1:
            raise BadSpec("n_per must be a positive integer", n_per=self.n_per)
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0 or self.seed > 2**64 - 1:
            raise BadSpec("seed must be an unsigned 64-bit integer", seed=self.seed)
        if not isinstance(self.n_controls, (int, np.integer)) or self.n_controls < 0:
            raise BadSpec("n_controls must be a nonnegative integer", n_controls=self.n_controls)

        beta = np.asarray(self.beta_true, dtype=float)
        if beta.shape != (d,) or not np.all(np.isfinite(beta)):
            raise BadSpec("beta_true must be a finite vector of length dim", shape=beta.shape)
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.shape != (d, d) or not np.all(np.isfinite(gamma)):
            raise BadSpec("gamma must be a finite dim x dim matrix", shape=gamma.shape)
        psi = np.eye(d) if self.psi is None else np.asarray(self.psi, dtype=float)
        if psi.shape != (d, d) or not np.all(np.isfinite(psi)):
            raise BadSpec("psi must be a finite dim x dim matrix", shape=psi.shape)
        sigma_u = check_covariance("sigma_u", self.sigma_u, dim=d, err=BadSpec)
        eps = np.zeros((d, d)) if self.sigma_eps_x is None else self.sigma_eps_x
        sigma_eps_x = check_covariance("sigma_eps_x", eps, dim=d, err=BadSpec)

        object.__setattr__(self, "dim", int(d))
        object.__setattr__(self, "k_groups", int(self.k_groups))
        object.__setattr__(self, "n_per", int(self.n_per))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "n_controls", int(self.n_controls))
        object.__setattr__(self, "beta_true", _frozen_array(beta))
        object.__setattr__(self, "gamma", _frozen_array(gamma))
        object.__setattr__(self, "psi", _frozen_array(psi))
        object.__setattr__(self, "sigma_u", _frozen_array(sigma_u))
        object.__setattr__(self, "sigma_eps_x", _frozen_array(sigma_eps_x))

    def gamma_rowsum(self) -> np.ndarray:
        """Confounding loading of u into the scalar outcome."""
        return self.gamma.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "k_groups": self.k_groups,
            "n_per": self.n_per,
            "seed": self.seed,
            "firststage": firststage_to_dict(self.firststage),
            "beta_true": self.beta_true.tolist(),
            "gamma": self.gamma.tolist(),
            "sigma_u": self.sigma_u.tolist(),
            "psi": self.psi.tolist(),
            "sigma_eps_x": self.sigma_eps_x.tolist(),
            "n_controls": self.n_controls,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        return cls(
            dim=d["dim"], k_groups=d["k_groups"], n_per=d["n_per"], seed=d["seed"],
            firststage=firststage_from_dict(d["firststage"]),
            beta_true=np.asarray(d["beta_true"], dtype=float),
            gamma=np.asarray(d["gamma"], dtype=float),
            sigma_u=np.asarray(d["sigma_u"], dtype=float),
            psi=np.asarray(d["psi"], dtype=float),
            sigma_eps_x=np.asarray(d["sigma_eps_x"], dtype=float),
            n_controls=d.get("n_controls", 0),
        )


@dataclass(frozen=True, eq=False)
class CvResult:
    """A loss curve over a threshold grid and the selected threshold.

    Grid points where the estimate does not exist (too few retained groups,
    or a singular retained design) carry a NaN loss and ``estimable`` False;
    they are excluded from selection but never silently dropped.
    ``groups_retained_at`` is the minimum retained-group count seen across
    all fold fits at that threshold.
    """

    grid: np.ndarray
    losses: np.ndarray
    selected_q: float
    folds: int
    groups_retained_at: np.ndarray
    estimable: np.ndarray
    n_splits: int = 1

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        losses = np.asarray(self.losses, dtype=float)
        retained = np.asarray(self.groups_retained_at, dtype=int)
        ok = np.asarray(self.estimable, dtype=bool)
        if grid.ndim != 1 or grid.size == 0:
            raise ValidationError("grid must be a nonempty vector")
        if np.any(grid <= 0.0) or np.any(grid > 1.0):
            raise ValidationError("grid thresholds must lie in (0, 1]")
        if np.any(np.diff(grid) <= 0):
            raise ValidationError("grid must be strictly increasing")
        if losses.shape != grid.shape or retained.shape != grid.shape or ok.shape != grid.shape:
            raise ValidationError("losses, groups_retained_at, and estimable must match the grid")
        if np.any(~np.isfinite(losses[ok])) or np.any(losses[ok] < 0):
            raise ValidationError("losses must be finite and nonnegative where estimable")
        if not isinstance(self.folds, (int, np.integer)) or self.folds < 2:
            raise ValidationError("folds must be an integer of at least 2", folds=self.folds)
        if not isinstance(self.n_splits, (int, np.integer)) or self.n_splits < 1:
            raise ValidationError("n_splits must be a positive integer", n_splits=self.n_splits)
        q = float(self.selected_q)
        if not np.any(grid == q):
            raise ValidationError("selected_q must be an element of the grid", selected_q=q)
        object.__setattr__(self, "grid", _frozen_array(grid))
        object.__setattr__(self, "losses", _frozen_array(losses))
        object.__setattr__(self, "selected_q", q)
        object.__setattr__(self, "folds", int(self.folds))
        object.__setattr__(self, "groups_retained_at", _frozen_array(retained, dtype=int))
        object.__setattr__(self, "estimable", _frozen_array(ok, dtype=bool))
        object.__setattr__(self, "n_splits", int(self.n_splits))

    @property
    def selected_index(self) -> int:
        return int(np.flatnonzero(self.grid == self.selected_q)[0])

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "losses": [None if not ok else v for v, ok in zip(self.losses.tolist(), self.estimable.tolist())],
            "selected_q": self.selected_q,
            "folds": self.folds,
            "groups_retained_at": self.groups_retained_at.tolist(),
            "estimable": self.estimable.tolist(),
            "n_splits": self.n_splits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvResult":
        losses = np.array([np.nan if v is None else float(v) for v in d["losses"]])
        return cls(grid=np.asarray(d["grid"], dtype=float), losses=losses,
                   selected_q=d["selected_q"], folds=d["folds"],
                   groups_retained_at=np.asarray(d["groups_retained_at"], dtype=int),
                   estimable=np.asarray(d["estimable"], dtype=bool),
                   n_splits=d.get("n_splits", 1))


_TYPES = {
    "GroupSummary": GroupSummary,
    "MetaDataset": MetaDataset,
    "NoiseModel": NoiseModel,
    "RegularizedEstimate": RegularizedEstimate,
    "SimulationSpec": SimulationSpec,
    "CvResult": CvResult,
}


def to_json(obj) -> str:
    """Serialize any model value (or first-stage generator) to JSON."""
    if type(obj).__name__ in _TYPES:
        payload = {"type": type(obj).__name__, "value": obj.to_dict()}
    else:
        payload = {"type": "FirstStageGen", "value": firststage_to_dict(obj)}
    return json.dumps(payload)


def from_json(s: str):
    payload = json.loads(s)
    kind = payload.get("type")
    if kind == "FirstStageGen":
        return firststage_from_dict(payload["value"])
    if kind not in _TYPES:
        raise ValidationError("unknown serialized type", type=kind)
    return _TYPES[kind].from_dict(payload["value"])
