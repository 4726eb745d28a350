"""Metrics and the strategy-comparison harness.

Four ways of handling a dataset sequence are compared on equal footing
(identical networks, losses and optimizer):

- ``freeze``     train once, apply unchanged to every later dataset
- ``finetune``   keep training the same model on each new dataset
- ``retrain``    keep all raw data, retrain from scratch on the union
- ``continual``  bounded-memory continual learner (plus three ablations:
  ``continual-no-transform``, ``continual-no-herding``,
  ``continual-no-cosine``)

After every stage each strategy is scored on the test split of every
dataset seen so far. Only ``retrain`` may keep raw covariates across
stages; the others provably hold none.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import binom

from .datasets import (
    DatasetSplit,
    ObservationalDataset,
    VariableLayout,
    draw_structural_weights,
    make_sequence,
    scenario_specs,
)
from .errors import ConfigError
from .estimators import BaselineEffectEstimator, ContinualEffectLearner
from .memory import build_memory

STRATEGY_KINDS = (
    "freeze",
    "finetune",
    "retrain",
    "continual",
    "continual-no-transform",
    "continual-no-herding",
    "continual-no-cosine",
)
ABLATION_KINDS = STRATEGY_KINDS[3:]


def metrics(true_ite, est_ite) -> tuple[float, float]:
    """Root mean squared effect error and absolute mean-effect error."""
    true_ite = np.asarray(true_ite, dtype=np.float64).reshape(-1)
    est_ite = np.asarray(est_ite, dtype=np.float64).reshape(-1)
    if true_ite.size == 0:
        raise ValueError("metrics need at least one unit")
    if true_ite.shape != est_ite.shape:
        raise ValueError("effect vectors must have equal length")
    sqrt_pehe = float(np.sqrt(np.mean((true_ite - est_ite) ** 2)))
    ate_error = float(abs(true_ite.mean() - est_ite.mean()))
    return sqrt_pehe, ate_error


@dataclass(frozen=True)
class StrategySpec:
    kind: str

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError("strategy", f"unknown kind {self.kind!r}")

    @property
    def uses_memory(self) -> bool:
        return self.kind.startswith("continual") and self.kind != "continual-no-transform"

    @property
    def cosine_output(self) -> bool:
        return self.kind != "continual-no-cosine"


@dataclass
class MetricsRow:
    strategy: str
    stage: int
    eval_source: int
    seed: int
    sqrt_pehe: float
    ate_error: float
    runtime_seconds: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def select(self, strategy=None, stage=None, eval_source=None, seed=None):
        out = self.rows
        if strategy is not None:
            out = [r for r in out if r.strategy == strategy]
        if stage is not None:
            out = [r for r in out if r.stage == stage]
        if eval_source is not None:
            out = [r for r in out if r.eval_source == eval_source]
        if seed is not None:
            out = [r for r in out if r.seed == seed]
        return out

    def values(self, metric: str, **kwargs) -> np.ndarray:
        rows = sorted(self.select(**kwargs), key=lambda r: r.seed)
        return np.array([getattr(r, metric) for r in rows])

    def seed_mean(self, metric: str, **kwargs) -> float:
        return float(self.values(metric, **kwargs).mean())

    def aggregate(self) -> list[dict]:
        """Mean and standard deviation over seeds per (strategy, stage, source)."""
        keys = sorted({(r.strategy, r.stage, r.eval_source) for r in self.rows})
        out = []
        for strategy, stage, src in keys:
            rows = self.select(strategy=strategy, stage=stage, eval_source=src)
            pehe = np.array([r.sqrt_pehe for r in rows])
            ate = np.array([r.ate_error for r in rows])
            out.append(
                {
                    "strategy": strategy,
                    "stage": stage,
                    "eval_source": src,
                    "n_seeds": len(rows),
                    "sqrt_pehe_mean": float(pehe.mean()),
                    "sqrt_pehe_std": float(pehe.std()),
                    "ate_error_mean": float(ate.mean()),
                    "ate_error_std": float(ate.std()),
                }
            )
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["strategy", "stage", "eval_source", "seed",
                 "sqrt_pehe", "ate_error", "runtime_seconds"]
            )
            for r in sorted(
                self.rows, key=lambda r: (r.strategy, r.seed, r.stage, r.eval_source)
            ):
                writer.writerow(
                    [r.strategy, r.stage, r.eval_source, r.seed,
                     f"{r.sqrt_pehe:.17g}", f"{r.ate_error:.17g}",
                     f"{r.runtime_seconds:.6f}"]
                )

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        report = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                report.rows.append(
                    MetricsRow(
                        strategy=rec["strategy"],
                        stage=int(rec["stage"]),
                        eval_source=int(rec["eval_source"]),
                        seed=int(rec["seed"]),
                        sqrt_pehe=float(rec["sqrt_pehe"]),
                        ate_error=float(rec["ate_error"]),
                        runtime_seconds=float(rec["runtime_seconds"]),
                    )
                )
        return report


def sign_test(a: np.ndarray, b: np.ndarray) -> tuple[int, int, float]:
    """Paired one-sided sign test for a < b; returns (wins, usable pairs, p value)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = b - a
    informative = diff != 0
    wins = int((diff[informative] > 0).sum())
    n = int(informative.sum())
    p = float(binom.sf(wins - 1, n, 0.5)) if n else 1.0
    return wins, n, p


def render_table(report: MetricsReport, stage: int | None = None) -> str:
    """Fixed-width summary: strategies x seen datasets at one stage."""
    stages = sorted({r.stage for r in report.rows})
    stage = stages[-1] if stage is None else stage
    sources = sorted({r.eval_source for r in report.select(stage=stage)})
    strategies = [k for k in STRATEGY_KINDS
                  if any(r.strategy == k for r in report.rows)]
    header = f"{'strategy':<26}"
    for src in sources:
        header += f"{f'data {src} rPEHE':>18}{f'data {src} eATE':>18}"
    lines = [f"stage {stage} (mean over seeds, lower is better)", header,
             "-" * len(header)]
    for strat in strategies:
        line = f"{strat:<26}"
        for src in sources:
            rows = report.select(strategy=strat, stage=stage, eval_source=src)
            if rows:
                pehe = np.mean([r.sqrt_pehe for r in rows])
                ate = np.mean([r.ate_error for r in rows])
                line += f"{pehe:>18.4f}{ate:>18.4f}"
            else:
                line += f"{'-':>18}{'-':>18}"
        lines.append(line)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# strategy execution
# ---------------------------------------------------------------------------

@dataclass
class HarnessSettings:
    """Everything shared across strategies for one run."""

    rep_hidden: tuple = (64, 64)
    rep_dim: int = 32
    head_hidden: tuple = (32, 32)
    activation: str = "elu"
    alpha: float = 1.0
    lam: float = 1e-4
    beta: float = 1.0
    delta: float = 1.0
    memory_size: int = 500
    memory_batch_size: int = 64
    transform_hidden: tuple = (64,)
    phi_warmup_epochs: int = 0
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 128
    patience: int = 30
    ipm_epsilon: float = 0.05
    ipm_relative: bool = True
    ipm_iterations: int = 200
    ipm_tolerance: float = 1e-6
    model_selection: str = "final"
    seed: int = 0

    def _shared_kwargs(self, cosine: bool) -> dict:
        return dict(
            rep_hidden=tuple(self.rep_hidden),
            rep_dim=self.rep_dim,
            head_hidden=tuple(self.head_hidden),
            activation=self.activation,
            cosine_output=cosine,
            alpha=self.alpha,
            lam=self.lam,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            patience=self.patience,
            ipm_epsilon=self.ipm_epsilon,
            ipm_relative=self.ipm_relative,
            ipm_iterations=self.ipm_iterations,
            ipm_tolerance=self.ipm_tolerance,
            model_selection=self.model_selection,
            random_state=self.seed,
        )

    def baseline_estimator(self, cosine: bool = True, warm_start: bool = False):
        return BaselineEffectEstimator(
            warm_start=warm_start, **self._shared_kwargs(cosine)
        )

    def continual_estimator(self, spec: StrategySpec):
        return ContinualEffectLearner(
            beta=self.beta,
            delta=self.delta,
            memory_size=self.memory_size,
            memory_batch_size=self.memory_batch_size,
            selection="random" if spec.kind == "continual-no-herding" else "herding",
            use_transform=spec.kind != "continual-no-transform",
            transform_hidden=tuple(self.transform_hidden),
            phi_warmup_epochs=self.phi_warmup_epochs,
            **self._shared_kwargs(spec.cosine_output),
        )


def _split_arrays(data: ObservationalDataset, split: DatasetSplit):
    tr, va = split.train, split.validation
    return (
        (data.X[tr], data.t[tr], data.y[tr]),
        (data.X[va], data.t[va], data.y[va]),
    )


class StrategyRun:
    """One strategy walked through a dataset sequence, stage by stage.

    ``stage0_model`` injects an externally trained first-stage model so all
    strategies of one replicate share the identical starting point.
    """

    def __init__(self, spec: StrategySpec, settings: HarnessSettings,
                 stage0_model=None):
        self.spec = spec
        self.settings = settings
        self.stage = 0
        self._stage0_model = stage0_model
        if spec.kind in ("freeze", "finetune"):
            self.estimator = settings.baseline_estimator(
                warm_start=spec.kind == "finetune"
            )
        elif spec.kind == "retrain":
            self.estimator = settings.baseline_estimator()
            self._raw: list[tuple] = []
        else:
            self.estimator = settings.continual_estimator(spec)

    def step(self, data: ObservationalDataset, split: DatasetSplit) -> None:
        train, val = _split_arrays(data, split)
        kind = self.spec.kind
        if self.stage == 0 and self._stage0_model is not None and self.spec.cosine_output:
            self._install_stage0(train, val)
        elif kind == "freeze":
            if self.stage == 0:
                self.estimator.fit(*train, validation=val)
        elif kind == "finetune":
            self.estimator.fit(*train, validation=val)
        elif kind == "retrain":
            self._raw.append((train, val))
            X = np.concatenate([r[0][0] for r in self._raw])
            t = np.concatenate([r[0][1] for r in self._raw])
            y = np.concatenate([r[0][2] for r in self._raw])
            Xv = np.concatenate([r[1][0] for r in self._raw])
            tv = np.concatenate([r[1][1] for r in self._raw])
            yv = np.concatenate([r[1][2] for r in self._raw])
            self.estimator.fit(X, t, y, validation=(Xv, tv, yv))
        else:
            self.estimator.partial_fit(*train, validation=val)
        self.stage += 1

    def _install_stage0(self, train, val) -> None:
        est = self.estimator
        model = self._stage0_model.copy()
        model.alpha, model.lam = self.settings.alpha, self.settings.lam
        if isinstance(est, ContinualEffectLearner):
            X, t, y = train
            memory = None
            if est.use_transform:
                seeds = est._stage_seeds(0)
                memory = build_memory(
                    model, X, y, t, est.memory_size, selection=est.selection,
                    rng=np.random.default_rng(seeds[3]), source_tag=0,
                )
            est.resume(model, memory, stage=1)
        else:
            est.model_ = model
            est.n_features_in_ = model.rep_net.input_dim
            if self.spec.kind == "retrain":
                self._raw.append((train, val))

    def evaluate(self, seen, seed: int, runtime: float) -> list[MetricsRow]:
        rows = []
        for data, split in seen:
            X_test = data.X[split.test]
            est_ite = self.estimator.predict(X_test)
            sqrt_pehe, ate_error = metrics(data.true_tau[split.test], est_ite)
            rows.append(
                MetricsRow(
                    strategy=self.spec.kind,
                    stage=self.stage - 1,
                    eval_source=data.source_id,
                    seed=seed,
                    sqrt_pehe=sqrt_pehe,
                    ate_error=ate_error,
                    runtime_seconds=runtime,
                )
            )
        return rows

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Arrays the strategy keeps between stages (firewall introspection)."""
        out = {}
        est = self.estimator
        if isinstance(est, ContinualEffectLearner):
            out.update(est.state_arrays())
        elif getattr(est, "model_", None) is not None:
            out.update(est.model_.state_arrays())
        if self.spec.kind == "retrain":
            for i, (train, val) in enumerate(self._raw):
                for j, arr in enumerate((*train, *val)):
                    if arr is not None:
                        out[f"raw.{i}.{j}"] = arr
        return out

    def stored_float_count(self) -> int:
        return int(sum(a.size for a in self.state_arrays().values()))


def run_strategy(
    spec: StrategySpec,
    sequence,
    settings: HarnessSettings,
    seed: int | None = None,
    memory=None,
    stage0_model=None,
) -> tuple[list[MetricsRow], StrategyRun]:
    """Walk the sequence with one strategy; score on all seen test splits."""
    if memory is not None:
        if not spec.uses_memory:
            raise ConfigError(
                "memory", f"strategy {spec.kind!r} does not take a rehearsal memory"
            )
        settings = replace(settings, memory_size=memory)
    if len(sequence) < 2 and spec.kind != "freeze":
        raise ConfigError("scenario", "continual comparisons need at least 2 datasets")
    seed = settings.seed if seed is None else seed
    settings = replace(settings, seed=seed)
    run = StrategyRun(spec, settings, stage0_model=stage0_model)
    rows: list[MetricsRow] = []
    for d, (data, split) in enumerate(sequence):
        start = time.perf_counter()
        run.step(data, split)
        elapsed = time.perf_counter() - start
        rows.extend(run.evaluate(sequence[: d + 1], seed=seed, runtime=elapsed))
    return rows, run


# ---------------------------------------------------------------------------
# scenarios and suites
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSpec:
    name: str = "substantial-2"
    shift: str = "substantial"
    n_sources: int = 2
    n_per_source: int = 2000
    layout: VariableLayout = field(default_factory=VariableLayout)
    inter_type_level: float = 0.0
    seed: int = 0

    def build_sequence(self, replicate: int):
        """Datasets for one replicate: fixed source distributions, fresh
        structural weights and draws per replicate."""
        specs = scenario_specs(
            self.layout, self.n_sources, shift=self.shift,
            seed=self.seed, inter_type_level=self.inter_type_level,
        )
        child = np.random.SeedSequence([self.seed, replicate])
        w_seed, data_seed = (int(s.generate_state(1)[0]) for s in child.spawn(2))
        weights = draw_structural_weights(self.layout, seed=w_seed)
        return make_sequence(
            self.layout, specs, weights, self.n_per_source, seed=data_seed
        )


@dataclass
class FailureRecord:
    scenario: str
    strategy: str
    seed: int
    error: str


@dataclass
class SuiteResult:
    report: MetricsReport
    failures: list[FailureRecord]


class _BaselineCache:
    """Stage-one models shared by every strategy of one replicate."""

    def __init__(self, settings: HarnessSettings):
        self.settings = settings
        self._models = {}

    def get(self, sequence, seed: int):
        if seed not in self._models:
            data, split = sequence[0]
            train, val = _split_arrays(data, split)
            est = replace(self.settings, seed=seed).baseline_estimator()
            est.fit(*train, validation=val)
            self._models[seed] = est.model_
        return self._models[seed]


def run_suite(
    scenarios,
    strategies,
    replicates: int,
    settings: HarnessSettings,
    share_baseline: bool = True,
) -> SuiteResult:
    """Cross product of scenarios x strategies x replicate seeds.

    Failures are recorded per cell and the suite continues. The shared
    stage-one model only applies to cosine-output strategies; the no-cosine
    ablation trains its own.
    """
    specs = [s if isinstance(s, StrategySpec) else StrategySpec(s) for s in strategies]
    report = MetricsReport()
    failures: list[FailureRecord] = []
    for scenario in scenarios:
        cache = _BaselineCache(settings) if share_baseline else None
        for replicate in range(replicates):
            seed = settings.seed + replicate
            sequence = scenario.build_sequence(replicate)
            stage0 = cache.get(sequence, seed) if cache else None
            for spec in specs:
                try:
                    rows, _ = run_strategy(
                        spec, sequence, settings, seed=seed, stage0_model=stage0
                    )
                    report.extend(rows)
                except Exception as exc:  # record and keep going
                    failures.append(
                        FailureRecord(scenario.name, spec.kind, seed, repr(exc))
                    )
    return SuiteResult(report, failures)


def write_sweep_series(path, param: str, series: dict[float, MetricsReport]) -> None:
    """Plot-ready aggregate per swept value (final stage, per eval source)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [param, "strategy", "stage", "eval_source",
             "sqrt_pehe_mean", "sqrt_pehe_std", "ate_error_mean", "ate_error_std",
             "n_seeds"]
        )
        for value in sorted(series):
            for agg in series[value].aggregate():
                writer.writerow(
                    [value, agg["strategy"], agg["stage"], agg["eval_source"],
                     f"{agg['sqrt_pehe_mean']:.17g}", f"{agg['sqrt_pehe_std']:.17g}",
                     f"{agg['ate_error_mean']:.17g}", f"{agg['ate_error_std']:.17g}",
                     agg["n_seeds"]]
                )


def write_report_files(out_dir, report: MetricsReport, prefix: str = "report") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows_path = out_dir / f"{prefix}_rows.csv"
    report.to_csv(rows_path)
    agg_path = out_dir / f"{prefix}_aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        aggs = report.aggregate()
        writer = csv.DictWriter(fh, fieldnames=list(aggs[0].keys()) if aggs else
                                ["strategy", "stage", "eval_source"])
        writer.writeheader()
        for agg in aggs:
            writer.writerow(agg)
    table_path = out_dir / f"{prefix}_table.txt"
    table_path.write_text(render_table(report))
    return {"rows": rows_path, "aggregate": agg_path, "table": table_path}
