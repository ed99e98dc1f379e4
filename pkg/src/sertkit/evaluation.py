"""Persistence baseline, per-variable RMSE, the sparsity sweep, and the
SST-ANN contribution-based importance report."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    LongTable,
    SampleWindow,
    SimulationSpec,
    WindowDiagnostics,
    build_windows,
    dense_grid,
    make_split,
    simulate_series,
    sparsify,
    training_records,
)
from .encoding import NormStats, VariableVocabulary, compute_stats
from .errors import ConfigError, DataError
from .fileio import write_text
from .model import ModelConfig, embed_batch, make_batch, predict, sstann_forward
from .seeding import stream
from .tensor import ParameterStore, no_grad
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

NAIVE = "naive"


# -- baselines ---------------------------------------------------------------


def series_means(table: LongTable, span: tuple[int, int]) -> dict[tuple[str, str], float]:
    """Training-range mean of every (location, variable) series.

    A series without training observations falls back to the mean of the
    same variable across locations, then to 0.
    """
    sel = (table.timestamp >= span[0]) & (table.timestamp < span[1])
    sums: dict[tuple[str, str], list[float]] = {}
    by_var: dict[str, list[float]] = {}
    for loc, var, val in zip(table.location[sel].tolist(), table.variable[sel].tolist(), table.value[sel].tolist()):
        sums.setdefault((loc, var), []).append(val)
        by_var.setdefault(var, []).append(val)
    out = {}
    for loc, var in table.pairs():
        vals = sums.get((loc, var)) or by_var.get(var)
        out[(loc, var)] = float(np.mean(vals)) if vals else 0.0
    return out


def forward_fill(table: LongTable, fill_means: dict[tuple[str, str], float], time_range: tuple[int, int] | None = None) -> LongTable:
    """Dense table: each series carries its last observation forward.

    Hours before a series' first observation take ``fill_means[(loc, var)]``.
    """
    t0, t1 = time_range or table.time_range()
    hours = np.arange(t0, t1)
    cols_t, cols_l, cols_v, cols_x = [], [], [], []
    for loc, var in table.pairs():
        sel = (table.location == loc) & (table.variable == var)
        ts, vals = table.timestamp[sel], table.value[sel]
        pos = np.searchsorted(ts, hours, side="right") - 1
        filled = np.where(pos >= 0, vals[np.maximum(pos, 0)], fill_means.get((loc, var), 0.0))
        cols_t.append(hours)
        cols_l.append(np.full(len(hours), loc))
        cols_v.append(np.full(len(hours), var))
        cols_x.append(filled)
    if not cols_t:
        return LongTable.empty()
    return LongTable(np.concatenate(cols_t), np.concatenate(cols_l), np.concatenate(cols_v), np.concatenate(cols_x), table.origin)


def naive_forecast(filled: LongTable, windows: Sequence[SampleWindow], vocab: VariableVocabulary) -> np.ndarray:
    """Persistence: every target gets its series' value at the last input hour
    (``anchor - 1``) of the window. ``filled`` must be forward-filled."""
    if not windows:
        return np.zeros((0, len(vocab)))
    anchors = np.array([w.anchor for w in windows])
    t0, t1 = int(anchors.min()) - 1, int(anchors.max())
    grid, _ = dense_grid(filled, vocab, t0, t1)
    groups = np.array([0 if w.location is None else w.location for w in windows])
    pred = grid[groups, anchors - 1 - t0]
    if np.isnan(pred).any():
        raise DataError("forward-filled table does not cover every series at every window anchor")
    return pred


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricRow:
    model: str
    variable: str
    rmse: float | None
    n: int


@dataclass
class MetricsTable:
    rows: list[MetricRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def extend(self, other: MetricsTable) -> MetricsTable:
        self.rows.extend(other.rows)
        return self

    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def rmse(self, model: str, variable: str) -> float | None:
        for r in self.rows:
            if r.model == model and r.variable == variable:
                return r.rmse
        raise KeyError((model, variable))

    def overall(self, model: str) -> float:
        """Mean of the per-variable RMSEs that are present."""
        vals = [r.rmse for r in self.rows if r.model == model and r.rmse is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        lines = ["model,variable,rmse,n_targets"]
        for r in self.rows:
            lines.append(f"{r.model},{r.variable},{'' if r.rmse is None else repr(r.rmse)},{r.n}")
        for m in self.models():
            lines.append(f"{m},__overall__,{float(self.overall(m))!r},{sum(r.n for r in self.rows if r.model == m)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        names = list(dict.fromkeys(r.variable for r in self.rows))
        models = self.models()
        width = max([len("variable")] + [len(n) for n in names]) + 2
        head = "variable".ljust(width) + "".join(m.rjust(12) for m in models)
        out = [head, "-" * len(head)]
        for name in names + ["__overall__"]:
            cells = []
            for m in models:
                v = self.overall(m) if name == "__overall__" else self.rmse(m, name)
                cells.append(("absent" if v is None else f"{v:.4f}").rjust(12))
            out.append(name.ljust(width) + "".join(cells))
        if self.metadata:
            out.append("")
            out.extend(f"# {k}: {v}" for k, v in self.metadata.items())
        return "\n".join(out) + "\n"

    def save(self, stem: str | Path) -> None:
        write_text(Path(f"{stem}.csv"), self.to_csv())
        write_text(Path(f"{stem}.txt"), self.to_text())


def rmse_per_variable(predictions: np.ndarray, windows: Sequence[SampleWindow], names: Sequence[str], model: str) -> MetricsTable:
    """RMSE_k over observed targets only; unobserved variables are absent."""
    y = np.array([w.targets for w in windows]).reshape(len(windows), len(names))
    m = np.array([w.target_mask for w in windows]).reshape(len(windows), len(names))
    pred = np.asarray(predictions).reshape(y.shape)
    sq = np.where(m, (pred - np.where(m, y, 0.0)) ** 2, 0.0)
    counts = m.sum(axis=0)
    rows = []
    for k, name in enumerate(names):
        n = int(counts[k])
        rows.append(MetricRow(model, name, math.sqrt(sq[:, k].sum() / n) if n else None, n))
    return MetricsTable(rows)


# -- importance --------------------------------------------------------------


@dataclass
class ImportanceReport:
    predictors: list[str]
    targets: list[str]
    mean_contribution: np.ndarray  # (P, T)
    importance: np.ndarray  # (P, T), percent; columns sum to 100
    n_obs: np.ndarray  # (P,)
    excluded: list[str] = field(default_factory=list)

    @property
    def signed_importance(self) -> np.ndarray:
        return np.sign(self.mean_contribution) * self.importance

    def to_csv(self) -> str:
        lines = ["predictor,target,mean_contribution,importance,signed_importance,n_obs"]
        signed = self.signed_importance
        for j, tgt in enumerate(self.targets):
            for i, pred in enumerate(self.predictors):
                lines.append(
                    f"{pred},{tgt},{float(self.mean_contribution[i, j])!r},{float(self.importance[i, j])!r},{float(signed[i, j])!r},{int(self.n_obs[i])}"
                )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len("predictor")] + [len(p) for p in self.predictors]) + 2
        head = "predictor".ljust(width) + "".join(t.rjust(max(len(t), 8) + 2) for t in self.targets)
        out = ["signed importance (%)", head, "-" * len(head)]
        signed = self.signed_importance
        for i, p in enumerate(self.predictors):
            out.append(p.ljust(width) + "".join(f"{signed[i, j]:+.2f}".rjust(max(len(t), 8) + 2) for j, t in enumerate(self.targets)))
        out.append("total".ljust(width) + "".join(f"{self.importance[:, j].sum():.2f}".rjust(max(len(t), 8) + 2) for j, t in enumerate(self.targets)))
        if self.excluded:
            out.append(f"# excluded (no observations): {', '.join(self.excluded)}")
        return "\n".join(out) + "\n"

    def save(self, stem: str | Path) -> None:
        write_text(Path(f"{stem}.csv"), self.to_csv())
        write_text(Path(f"{stem}.txt"), self.to_text())


def contribution_sums(
    params: ParameterStore,
    config: ModelConfig,
    stats: NormStats,
    windows: Sequence[SampleWindow],
    batch_size: int = 128,
) -> tuple[np.ndarray, np.ndarray]:
    """Per input variable: summed contributions (V, K) and observation counts (V,)."""
    V = len(stats.mean)
    sums = np.zeros((V, config.n_targets))
    counts = np.zeros(V, dtype=np.int64)
    for s in range(0, len(windows), batch_size):
        batch = make_batch(windows[s:s + batch_size], stats, config)
        with no_grad():
            _, contrib, _ = sstann_forward(embed_batch(batch, params, config), params, config)
        c = contrib.data[batch.mask]
        f = batch.f[batch.mask]
        np.add.at(sums, f, c)
        counts += np.bincount(f, minlength=V)
    return sums, counts


def importance_from_means(mean_c: np.ndarray) -> np.ndarray:
    """|c| / sum|c| * 100 down each column. An all-zero column is uniform."""
    mag = np.abs(mean_c)
    total = mag.sum(axis=0, keepdims=True)
    uniform = np.full_like(mag, 100.0 / max(mag.shape[0], 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, mag / np.where(total > 0, total, 1.0) * 100.0, uniform)


def importance_index(
    kind: str,
    params: ParameterStore,
    config: ModelConfig,
    vocab: VariableVocabulary,
    stats: NormStats,
    windows: Sequence[SampleWindow],
    predictors: Sequence[str] | None = None,
    targets: Sequence[str] | None = None,
) -> ImportanceReport:
    """Mean contribution of each predictor variable to each target, and the
    normalised importance over the predictor set."""
    if kind != "sstann":
        raise ConfigError("importance needs an SST-ANN model: only its predictions decompose exactly into per-observation contributions")
    predictors = list(predictors) if predictors else list(vocab.names)
    targets = list(targets) if targets else list(vocab.names)
    p_idx = [vocab.index(p) for p in predictors]
    t_idx = [vocab.index(t) for t in targets]
    sums, counts = contribution_sums(params, config, stats, windows)
    keep = [i for i, p in enumerate(p_idx) if counts[p] > 0]
    excluded = [predictors[i] for i, p in enumerate(p_idx) if counts[p] == 0]
    kept = [p_idx[i] for i in keep]
    mean_c = sums[kept][:, t_idx] / counts[kept][:, None] if kept else np.zeros((0, len(t_idx)))
    return ImportanceReport(
        predictors=[predictors[i] for i in keep],
        targets=targets,
        mean_contribution=mean_c,
        importance=importance_from_means(mean_c),
        n_obs=counts[kept],
        excluded=excluded,
    )


# -- sparsity sweep ----------------------------------------------------------


DEFAULT_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8)


@dataclass
class SweepRun:
    level: float
    seed: int
    metrics: MetricsTable
    windows: dict = field(default_factory=dict)


def config_digest(*objs) -> str:
    text = json.dumps([asdict(o) for o in objs], sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def evaluate_models(
    models: dict[str, tuple[ParameterStore, str]],
    test_windows: Sequence[SampleWindow],
    vocab: VariableVocabulary,
    config: ModelConfig,
    stats: NormStats,
) -> MetricsTable:
    table = MetricsTable()
    for name, (params, kind) in models.items():
        pred = predict(kind, test_windows, params, config, stats)
        table.extend(rmse_per_variable(pred, test_windows, vocab.names, name))
    return table


def run_sweep_level(
    spec: SimulationSpec,
    level: float,
    seed: int,
    models: Sequence[str],
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_steps: int,
    dense: LongTable | None = None,
) -> SweepRun:
    """One (level, seed) cell: simulate, sparsify inputs, fit, score on the test range.

    Inputs come from the sparsified table; targets from the dense one.
    """
    if dense is None:
        dense = simulate_series(SimulationSpec(**{**asdict(spec), "seed": seed}))
    sparse = sparsify(dense, level, stream(seed, f"sparsify/{level:.4f}"))
    vocab = VariableVocabulary.from_pairs(dense.pairs(), model_config.location_mode)
    split = make_split(dense.time_range(), train_steps)
    L, h = model_config.lookback, model_config.horizon
    idx, vals = training_records(sparse, vocab, split.train)
    stats = compute_stats(idx, vals, len(vocab), L)
    built: dict[str, tuple[list[SampleWindow], WindowDiagnostics]] = {}
    for part in ("train", "val", "test"):
        built[part] = build_windows(sparse, vocab, L, h, model_config.n_max, getattr(split, part), target_table=dense)
    counts = {part: asdict(diag) for part, (_, diag) in built.items()}
    test = built["test"][0]
    if not test:
        raise DataError(f"level {level}, seed {seed}: no non-empty test windows")
    filled = forward_fill(sparse, series_means(sparse, split.train), dense.time_range())
    metrics = rmse_per_variable(naive_forecast(filled, test, vocab), test, vocab.names, NAIVE)
    tc = TrainConfig(**{**asdict(train_config), "seed": seed})
    for kind in models:
        result = fit(kind, built["train"][0], built["val"][0], model_config, tc, vocab, stats)
        pred = predict(kind, test, result.params, model_config, stats)
        metrics.extend(rmse_per_variable(pred, test, vocab.names, kind))
    metrics.metadata = {
        "sparsity": level,
        "seed": seed,
        "n_steps": spec.n_steps,
        "train_steps": train_steps,
        "config_digest": config_digest(model_config, tc),
        "test_windows": len(test),
        "empty_windows": sum(c["empty"] for c in counts.values()),
    }
    return SweepRun(level, seed, metrics, counts)


def sparsity_sweep(
    spec: SimulationSpec,
    levels: Sequence[float] = DEFAULT_LEVELS,
    models: Sequence[str] = ("sert", "sstann"),
    seeds: Sequence[int] = (0,),
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    train_steps: int = 37_000,
    out_dir: str | Path | None = None,
) -> list[SweepRun]:
    """Fit every model at every sparsity level and seed; results sorted by (level, seed).

    With ``out_dir`` each cell writes ``metrics_{model}_level{L}_seed{S}.csv``
    and each level a seed-aggregated ``sweep_level{L}.csv``.
    """
    model_config = model_config or ModelConfig(n_targets=spec.n_series, n_max=spec.n_series * 10)
    train_config = train_config or TrainConfig()
    runs = []
    for seed in seeds:
        dense = simulate_series(SimulationSpec(**{**asdict(spec), "seed": seed}))
        for level in levels:
            log.info("sweep level %.2f seed %d", level, seed)
            try:
                run = run_sweep_level(spec, level, seed, models, model_config, train_config, train_steps, dense)
            except (DataError, ArithmeticError) as exc:
                raise type(exc)(f"sweep level {level}, seed {seed}: {exc}") from exc
            runs.append(run)
    runs.sort(key=lambda r: (r.level, r.seed))
    if out_dir is not None:
        write_sweep(runs, Path(out_dir))
    return runs


def level_summary(runs: Sequence[SweepRun], level: float) -> MetricsTable:
    """Per-variable RMSE averaged over seeds at one level."""
    cells = [r for r in runs if r.level == level]
    out = MetricsTable(metadata={"sparsity": level, "seeds": ",".join(str(r.seed) for r in cells)})
    first = cells[0].metrics
    for row in first.rows:
        vals = [c.metrics.rmse(row.model, row.variable) for c in cells]
        vals = [v for v in vals if v is not None]
        n = sum(next(r.n for r in c.metrics.rows if r.model == row.model and r.variable == row.variable) for c in cells)
        out.rows.append(MetricRow(row.model, row.variable, float(np.mean(vals)) if vals else None, n))
    return out


def write_sweep(runs: Sequence[SweepRun], out_dir: Path) -> list[Path]:
    written = []
    for run in runs:
        for model in run.metrics.models():
            sub = MetricsTable([r for r in run.metrics.rows if r.model == model], dict(run.metrics.metadata))
            stem = out_dir / f"metrics_{model}_level{run.level:g}_seed{run.seed}"
            sub.save(stem)
            written.append(Path(f"{stem}.csv"))
    for level in sorted({r.level for r in runs}):
        stem = out_dir / f"sweep_level{level:g}"
        level_summary(runs, level).save(stem)
        written.append(Path(f"{stem}.csv"))
    lines = ["level,seed,model,overall_rmse,test_windows,empty_windows"]
    for run in runs:
        for model in run.metrics.models():
            lines.append(
                f"{run.level:g},{run.seed},{model},{float(run.metrics.overall(model))!r},"
                f"{run.metrics.metadata['test_windows']},{run.metrics.metadata['empty_windows']}"
            )
    write_text(out_dir / "sweep_summary.csv", "\n".join(lines) + "\n")
    written.append(out_dir / "sweep_summary.csv")
    return written
