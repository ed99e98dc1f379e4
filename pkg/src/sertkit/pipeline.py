"""Run configuration and the table -> windows -> model plumbing shared by the
CLI and library callers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .data import LongTable, SampleWindow, Split, WindowDiagnostics, build_windows, make_split, training_records
from .encoding import NormStats, VariableVocabulary, compute_stats
from .errors import ConfigError, DataError
from .model import Checkpoint, ModelConfig
from .training import FitResult, TrainConfig, fit


@dataclass
class DataConfig:
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    test_start: int = -1  # hour index; -1 means derive from test_fraction


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_flat(self) -> dict:
        out = {}
        for section in (self.model, self.train, self.data):
            out.update(asdict(section))
        return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}
_KEYS = {f.name: (section, f.type) for section, cls in _SECTIONS.items() for f in fields(cls)}
# n_max / n_targets of 0 mean "derive from the data"
_AUTO_DEFAULTS = {"n_max": 0, "n_targets": 0}


def _coerce(key: str, raw: str):
    default = getattr(_SECTIONS[_KEYS[key][0]](), key)
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(path: str | Path | None = None, overrides: dict | None = None, base: dict | None = None) -> dict:
    """Merge defaults < ``base`` < config file < ``overrides`` into a flat dict."""
    flat = RunConfig().to_flat()
    flat.update(_AUTO_DEFAULTS)
    flat.update(base or {})
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = _coerce(key, value) if isinstance(value, str) else value
    return flat


def materialize(flat: dict, vocab: VariableVocabulary) -> RunConfig:
    """Fill data-derived values and validate."""
    flat = dict(flat)
    if not flat.get("n_targets"):
        flat["n_targets"] = len(vocab)
    if not flat.get("n_max"):
        flat["n_max"] = flat["lookback"] * len(vocab)
    if flat["n_targets"] != len(vocab):
        raise ConfigError(f"n_targets={flat['n_targets']} but the data has {len(vocab)} target series")
    if flat["location_mode"] != vocab.mode:
        raise ConfigError("location_mode does not match the vocabulary")
    parts = {name: cls(**{f.name: flat[f.name] for f in fields(cls)}) for name, cls in _SECTIONS.items()}
    run = RunConfig(**parts)
    run.model.validate()
    run.train.validate()
    return run


def format_config(flat: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


@dataclass
class Prepared:
    vocab: VariableVocabulary
    split: Split
    stats: NormStats
    windows: dict[str, list[SampleWindow]]
    diagnostics: dict[str, WindowDiagnostics]


def choose_split(table: LongTable, data_cfg: DataConfig) -> Split:
    rng = table.time_range()
    if rng[1] - rng[0] < 3:
        raise DataError("table spans too few hours to split into train/validation/test")
    if data_cfg.test_start >= 0:
        return make_split(rng, data_cfg.test_start, data_cfg.val_fraction)
    test_start = rng[1] - int(round(data_cfg.test_fraction * (rng[1] - rng[0])))
    return make_split(rng, test_start, data_cfg.val_fraction)


def prepare(
    table: LongTable,
    run: RunConfig,
    vocab: VariableVocabulary,
    split: Split,
    stats: NormStats | None = None,
    target_table: LongTable | None = None,
    parts: Sequence[str] = ("train", "val", "test"),
) -> Prepared:
    """Windows for each split part; statistics from the training part only."""
    L, h = run.model.lookback, run.model.horizon
    if stats is None:
        idx, vals = training_records(table, vocab, split.train)
        if idx.size == 0:
            raise DataError("no observations in the training range")
        stats = compute_stats(idx, vals, len(vocab), L)
    windows, diags = {}, {}
    for part in parts:
        windows[part], diags[part] = build_windows(table, vocab, L, h, run.model.n_max, getattr(split, part), target_table)
    return Prepared(vocab, split, stats, windows, diags)


def vocab_for(table: LongTable, mode: str) -> VariableVocabulary:
    if not len(table):
        raise DataError("table is empty")
    return VariableVocabulary.from_pairs(table.pairs(), mode)


def train_on_table(table: LongTable, kind: str, flat: dict, on_improve=None) -> tuple[Checkpoint, FitResult, Prepared, RunConfig]:
    vocab = vocab_for(table, flat["location_mode"])
    run = materialize(flat, vocab)
    prep = prepare(table, run, vocab, choose_split(table, run.data))
    meta = {"split": prep.split.to_dict(), "run_config": run.to_flat()}
    if not prep.windows["train"] or not prep.windows["val"]:
        raise DataError("training or validation range yields no windows")

    def improved(epoch, params):
        if on_improve is not None:
            on_improve(epoch, Checkpoint(kind, run.model, vocab, prep.stats, params, meta))

    result = fit(kind, prep.windows["train"], prep.windows["val"], run.model, run.train, vocab, prep.stats, on_improve=improved)
    return Checkpoint(kind, run.model, vocab, prep.stats, result.params, meta), result, prep, run


def check_vocab(table: LongTable, vocab: VariableVocabulary) -> None:
    """Every series in ``table`` must be known to the model vocabulary."""
    known = set(vocab.names)
    for loc, var in table.pairs():
        if vocab.key(loc, var) not in known:
            raise DataError(f"series {vocab.key(loc, var)!r} is not in the model vocabulary")
        if vocab.mode == "B" and loc not in vocab.locations:
            raise DataError(f"location {loc!r} is not in the model vocabulary")


def windows_summary(prep: Prepared) -> dict:
    return {part: asdict(d) for part, d in prep.diagnostics.items()}
