"""Synthetic multi-source observational data with known treatment effects.

Covariates follow a multivariate normal whose correlation matrix is built
from per-type hub-Toeplitz blocks; outcomes follow a partially linear model
``y = tau(c, a) * t + g(c, a) + noise`` with trigonometric effect surfaces,
so the individual effect of every generated unit is known exactly. Sources
differ in mean vectors and correlation structure, giving controllable
domain shift across a dataset sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import ndtr

from .errors import (
    CorrelationBudgetError,
    DegeneratePropensityError,
    DimensionMismatchError,
    NotPositiveDefiniteError,
)

VAR_TYPES = ("confounder", "instrumental", "irrelevant", "adjustment")
MIN_EIGENVALUE = 1e-8
SHIFT_OFFSETS = {"none": 0.0, "moderate": 0.4, "substantial": 1.0}


@dataclass(frozen=True)
class VariableLayout:
    """Counts of each covariate type; column order is C, Z, I, A."""

    n_confounders: int = 35
    n_adjustment: int = 35
    n_instrumental: int = 10
    n_irrelevant: int = 20

    def __post_init__(self):
        for name, value in self.counts().items():
            if value < 0:
                raise ValueError(f"negative count for {name}")
        if self.total == 0:
            raise ValueError("layout has no variables")

    def counts(self) -> dict[str, int]:
        return {
            "confounder": self.n_confounders,
            "instrumental": self.n_instrumental,
            "irrelevant": self.n_irrelevant,
            "adjustment": self.n_adjustment,
        }

    @property
    def total(self) -> int:
        return sum(self.counts().values())

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for t in VAR_TYPES:
            n = self.counts()[t]
            out[t] = slice(start, start + n)
            start += n
        return out

    def columns(self, *types: str) -> np.ndarray:
        sl = self.slices()
        return np.concatenate([np.arange(sl[t].start, sl[t].stop) for t in types])

    def roles(self) -> list[str]:
        return [t for t in VAR_TYPES for _ in range(self.counts()[t])]

    def to_dict(self) -> dict:
        return {
            "n_confounders": self.n_confounders,
            "n_adjustment": self.n_adjustment,
            "n_instrumental": self.n_instrumental,
            "n_irrelevant": self.n_irrelevant,
        }


@dataclass(frozen=True)
class HubParams:
    rho_max: float = 0.7
    rho_min: float = 0.2
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rho_min <= self.rho_max < 1.0:
            raise ValueError(
                f"need 0 <= rho_min <= rho_max < 1, got ({self.rho_min}, {self.rho_max})"
            )
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def to_dict(self) -> dict:
        return {"rho_max": self.rho_max, "rho_min": self.rho_min, "gamma": self.gamma}


@dataclass
class SourceSpec:
    """Distribution of one data source: per-type means, scales and hub correlations.

    ``scales`` are the per-variable standard deviations (the diagonal of D in
    the covariance D R D); the default is one for every variable.
    """

    means: dict[str, np.ndarray]
    hubs: dict[str, HubParams]
    inter_type_level: float = 0.0
    seed: int = 0
    scales: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.inter_type_level < 0:
            raise ValueError("inter_type_level must be non-negative")
        self.means = {t: np.asarray(m, dtype=np.float64) for t, m in self.means.items()}
        if self.scales is not None:
            self.scales = {
                t: np.asarray(s, dtype=np.float64) for t, s in self.scales.items()
            }
            for t, s in self.scales.items():
                if (s <= 0).any():
                    raise ValueError(f"scales for {t} must be positive")

    @classmethod
    def for_layout(
        cls,
        layout: VariableLayout,
        mean: float | dict[str, float] = 0.0,
        hub: HubParams | dict[str, HubParams] | None = None,
        inter_type_level: float = 0.0,
        seed: int = 0,
        scale: float | dict[str, float] = 1.0,
    ) -> "SourceSpec":
        hub = hub if hub is not None else HubParams()
        means = {}
        hubs = {}
        scales = {}
        for t, n in layout.counts().items():
            m = mean[t] if isinstance(mean, dict) else mean
            s = scale[t] if isinstance(scale, dict) else scale
            means[t] = np.full(n, float(m))
            scales[t] = np.full(n, float(s))
            hubs[t] = hub[t] if isinstance(hub, dict) else hub
        return cls(means=means, hubs=hubs, inter_type_level=inter_type_level,
                   seed=seed, scales=scales)

    def _type_vector(self, layout: VariableLayout, values: dict | None,
                     default: float, what: str) -> np.ndarray:
        parts = []
        for t in VAR_TYPES:
            n = layout.counts()[t]
            v = values[t] if values is not None else np.full(n, default)
            if v.size != n:
                raise DimensionMismatchError(
                    f"{what} vector for {t} has {v.size} entries, layout has {n}"
                )
            parts.append(v)
        return np.concatenate(parts)

    def mean_vector(self, layout: VariableLayout) -> np.ndarray:
        return self._type_vector(layout, self.means, 0.0, "mean")

    def scale_vector(self, layout: VariableLayout) -> np.ndarray:
        return self._type_vector(layout, self.scales, 1.0, "scale")

    def to_dict(self) -> dict:
        out = {
            "means": {t: self.means[t].tolist() for t in VAR_TYPES},
            "hubs": {t: self.hubs[t].to_dict() for t in VAR_TYPES},
            "inter_type_level": self.inter_type_level,
            "seed": self.seed,
        }
        if self.scales is not None:
            out["scales"] = {t: self.scales[t].tolist() for t in VAR_TYPES}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SourceSpec":
        scales = data.get("scales")
        return cls(
            means={t: np.asarray(v) for t, v in data["means"].items()},
            hubs={t: HubParams(**v) for t, v in data["hubs"].items()},
            inter_type_level=data["inter_type_level"],
            seed=data["seed"],
            scales=None if scales is None else
            {t: np.asarray(v) for t, v in scales.items()},
        )


@dataclass
class StructuralWeights:
    """Outcome / effect / assignment weights shared by every source."""

    b_tau: np.ndarray  # over (C, A)
    b_g: np.ndarray  # over (C, A)
    b_a: np.ndarray  # over (C, Z)

    def to_dict(self) -> dict:
        return {
            "b_tau": self.b_tau.tolist(),
            "b_g": self.b_g.tolist(),
            "b_a": self.b_a.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StructuralWeights":
        return cls(*(np.asarray(data[k], dtype=np.float64) for k in ("b_tau", "b_g", "b_a")))


def draw_structural_weights(layout: VariableLayout, seed: int = 0) -> StructuralWeights:
    rng = np.random.default_rng(seed)
    n_ca = layout.n_confounders + layout.n_adjustment
    n_cz = layout.n_confounders + layout.n_instrumental
    return StructuralWeights(
        b_tau=rng.uniform(0.0, 1.0, n_ca),
        b_g=rng.uniform(0.0, 1.0, n_ca),
        b_a=rng.uniform(0.0, 1.0, n_cz),
    )


# ---------------------------------------------------------------------------
# correlation structure
# ---------------------------------------------------------------------------

def hub_block(dim: int, rho_max: float, rho_min: float, gamma: float) -> np.ndarray:
    """Hub-Toeplitz correlation block.

    The first variable is the hub; correlation to variable i decays from
    rho_max to rho_min as ((i-2)/(d-2))**gamma, and the remainder of the
    matrix repeats the hub row along diagonals.
    """
    if dim < 2:
        raise ValueError("hub_block needs dim >= 2")
    if not 0.0 <= rho_min <= rho_max < 1.0:
        raise ValueError("need 0 <= rho_min <= rho_max < 1")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    col = np.empty(dim)
    col[0] = 1.0
    if dim == 2:
        col[1] = rho_max
    else:
        i = np.arange(2, dim + 1, dtype=np.float64)
        col[1:] = rho_max - ((i - 2.0) / (dim - 2.0)) ** gamma * (rho_max - rho_min)
    block = toeplitz(col)
    min_eig = float(np.linalg.eigvalsh(block)[0])
    if min_eig <= MIN_EIGENVALUE:
        raise NotPositiveDefiniteError(
            f"hub block of dim {dim} is not positive definite", min_eig
        )
    return block


def _type_block(dim: int, hub: HubParams) -> np.ndarray:
    if dim == 0:
        return np.zeros((0, 0))
    if dim == 1:
        return np.ones((1, 1))
    return hub_block(dim, hub.rho_max, hub.rho_min, hub.gamma)


def assemble_correlation(layout: VariableLayout, spec: SourceSpec) -> np.ndarray:
    """Full correlation matrix: per-type hub blocks, constant inter-type level."""
    p = layout.total
    corr = np.zeros((p, p))
    inter_mask = np.ones((p, p), dtype=bool)
    for t, sl in layout.slices().items():
        corr[sl, sl] = _type_block(sl.stop - sl.start, spec.hubs[t])
        inter_mask[sl, sl] = False
    level = float(spec.inter_type_level)
    if level > 0.0:
        corr[inter_mask] = level

    def min_eig(lvl: float) -> float:
        m = corr.copy()
        m[inter_mask] = lvl
        return float(np.linalg.eigvalsh(m)[0])

    smallest = float(np.linalg.eigvalsh(corr)[0])
    if smallest <= MIN_EIGENVALUE:
        if level == 0.0:
            raise NotPositiveDefiniteError(
                "block-diagonal correlation matrix is not positive definite", smallest
            )
        # smallest eigenvalue is concave in the level, so the feasible set
        # is an interval starting at 0: bisect for its upper end
        lo, hi = 0.0, level
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if min_eig(mid) > MIN_EIGENVALUE:
                lo = mid
            else:
                hi = mid
        raise CorrelationBudgetError(level, lo)
    return corr


# ---------------------------------------------------------------------------
# structural functions and dataset generation
# ---------------------------------------------------------------------------

def structural_functions(
    x_ca: np.ndarray, x_cz: np.ndarray, weights: StructuralWeights
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-unit effect tau, baseline response g and treatment propensity.

    tau and g are squared sine/cosine of linear scores over (C, A); the
    propensity is the standard-normal CDF of the standardized sine score
    over (C, Z), standardized with the given sample's mean and std.
    """
    if x_ca.shape[1] != weights.b_tau.size:
        raise DimensionMismatchError(
            f"(C, A) block has {x_ca.shape[1]} columns, weights expect {weights.b_tau.size}"
        )
    if x_cz.shape[1] != weights.b_a.size:
        raise DimensionMismatchError(
            f"(C, Z) block has {x_cz.shape[1]} columns, weights expect {weights.b_a.size}"
        )
    tau = np.sin(x_ca @ weights.b_tau) ** 2
    g = np.cos(x_ca @ weights.b_g) ** 2
    a = np.sin(x_cz @ weights.b_a)
    std = float(a.std())
    if std < 1e-12:
        raise DegeneratePropensityError(
            "treatment score is (near) constant; propensity undefined"
        )
    propensity = ndtr((a - a.mean()) / std)
    return tau, g, propensity


@dataclass
class ObservationalDataset:
    """One source's draw: covariates, assignment, outcome and ground truth."""

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    true_tau: np.ndarray
    true_propensity: np.ndarray
    noise: np.ndarray
    source_id: int
    layout: VariableLayout
    baseline: np.ndarray | None = None  # g as generated; None after file round-trip

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def baseline_response(self) -> np.ndarray:
        """g: stored when generated, otherwise recovered from the outcome model."""
        if self.baseline is not None:
            return self.baseline
        return self.y - self.true_tau * self.t - self.noise

    @property
    def y0(self) -> np.ndarray:
        return self.baseline_response + self.noise

    @property
    def y1(self) -> np.ndarray:
        return self.y0 + self.true_tau

    @property
    def true_ite(self) -> np.ndarray:
        """Exact unit-level effect: both potential outcomes share one noise draw."""
        return self.true_tau

    @property
    def true_ate(self) -> float:
        return float(self.true_tau.mean())


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        total = np.sort(np.concatenate([self.train, self.validation, self.test]))
        if not np.array_equal(total, np.arange(total.size)):
            raise ValueError("split must partition all unit indices")


def make_split(n: int, rng: np.random.Generator) -> DatasetSplit:
    """Random 60/20/20 train/validation/test partition."""
    perm = rng.permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    return DatasetSplit(
        train=perm[:n_train],
        validation=perm[n_train:n_train + n_val],
        test=perm[n_train + n_val:],
    )


def generate_source(
    layout: VariableLayout,
    spec: SourceSpec,
    weights: StructuralWeights,
    n: int,
    seed: int | None = None,
    source_id: int = 0,
) -> ObservationalDataset:
    """Draw one observational dataset from the source distribution.

    Both potential outcomes of a unit share the same noise draw, so the
    stored tau is the exact unit-level effect. Covariates follow
    N(mean, D R D) with D the per-variable scales (identity by default).
    """
    if n < 2:
        raise ValueError("need at least two units")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    corr = assemble_correlation(layout, spec)
    chol = np.linalg.cholesky(corr)
    x = rng.standard_normal((n, layout.total)) @ chol.T
    x = x * spec.scale_vector(layout) + spec.mean_vector(layout)
    tau, g, propensity = structural_functions(
        x[:, layout.columns("confounder", "adjustment")],
        x[:, layout.columns("confounder", "instrumental")],
        weights,
    )
    t = (rng.uniform(size=n) < propensity).astype(np.float64)
    noise = rng.standard_normal(n)
    y = tau * t + g + noise
    return ObservationalDataset(
        X=x, t=t, y=y, true_tau=tau, true_propensity=propensity,
        noise=noise, source_id=source_id, layout=layout, baseline=g,
    )


def make_sequence(
    layout: VariableLayout,
    specs: list[SourceSpec],
    weights: StructuralWeights,
    n_per_source: int,
    seed: int = 0,
) -> list[tuple[ObservationalDataset, DatasetSplit]]:
    """One dataset + split per source spec; all sources share the weights."""
    if not specs:
        raise ValueError("need at least one source spec")
    children = np.random.SeedSequence(seed).spawn(len(specs))
    out = []
    for d, (spec, child) in enumerate(zip(specs, children)):
        data_seed, split_seed = child.spawn(2)
        data = generate_source(
            layout, spec, weights, n_per_source,
            seed=int(data_seed.generate_state(1)[0]), source_id=d,
        )
        split = make_split(data.n, np.random.default_rng(split_seed))
        out.append((data, split))
    return out


def scenario_specs(
    layout: VariableLayout,
    n_sources: int,
    shift: str = "substantial",
    seed: int = 0,
    inter_type_level: float = 0.0,
) -> list[SourceSpec]:
    """Source specs for the three shift scenarios.

    "none" repeats one spec; the other presets offset every mean by the
    preset amount per source step and redraw hub parameters per source.
    """
    if shift not in SHIFT_OFFSETS:
        raise ValueError(f"unknown shift preset {shift!r}; options: {sorted(SHIFT_OFFSETS)}")
    offset = SHIFT_OFFSETS[shift]
    rng = np.random.default_rng(seed)
    base_hub = HubParams()
    dims = {layout.counts()[t] for t in VAR_TYPES}

    def draw_hub() -> HubParams:
        # rejection-sample until the block is positive definite at every
        # type dimension of this layout (rare within these ranges)
        for _ in range(100):
            hub = HubParams(
                rho_max=float(rng.uniform(0.55, 0.75)),
                rho_min=float(rng.uniform(0.15, 0.3)),
                gamma=float(rng.uniform(0.9, 1.2)),
            )
            try:
                for dim in dims:
                    _type_block(dim, hub)
            except NotPositiveDefiniteError:
                continue
            return hub
        raise NotPositiveDefiniteError("could not draw a positive definite hub block", 0.0)

    specs = []
    for d in range(n_sources):
        if shift == "none" or d == 0:
            hubs: HubParams | dict[str, HubParams] = base_hub
        else:
            hubs = {t: draw_hub() for t in VAR_TYPES}
        specs.append(
            SourceSpec.for_layout(
                layout,
                mean=offset * d,
                hub=hubs,
                inter_type_level=inter_type_level,
                seed=seed + d,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# columnar text persistence with regeneration manifest
# ---------------------------------------------------------------------------

def save_dataset(
    path,
    dataset: ObservationalDataset,
    spec: SourceSpec | None = None,
    weights: StructuralWeights | None = None,
    data_seed: int | None = None,
) -> None:
    path = Path(path)
    roles = dataset.layout.roles()
    colnames = [f"{role}_{i}" for i, role in enumerate(roles)]
    colnames += ["treatment", "outcome", "tau", "propensity", "noise", "source_id"]
    table = np.column_stack(
        [
            dataset.X,
            dataset.t,
            dataset.y,
            dataset.true_tau,
            dataset.true_propensity,
            dataset.noise,
            np.full(dataset.n, dataset.source_id, dtype=np.float64),
        ]
    )
    np.savetxt(path, table, fmt="%.17g", delimiter=",",
               header=",".join(colnames), comments="")
    manifest = {
        "format": "effectstream-dataset-v1",
        "layout": dataset.layout.to_dict(),
        "n": dataset.n,
        "source_id": dataset.source_id,
    }
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    if weights is not None:
        manifest["weights"] = weights.to_dict()
    if data_seed is not None:
        manifest["data_seed"] = data_seed
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(path) -> tuple[ObservationalDataset, dict]:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        manifest = json.load(fh)
    layout = VariableLayout(**manifest["layout"])
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    p = layout.total
    dataset = ObservationalDataset(
        X=table[:, :p],
        t=table[:, p],
        y=table[:, p + 1],
        true_tau=table[:, p + 2],
        true_propensity=table[:, p + 3],
        noise=table[:, p + 4],
        source_id=int(table[0, p + 5]),
        layout=layout,
    )
    return dataset, manifest
