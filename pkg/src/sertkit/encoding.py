"""Triplet embeddings: variable lookup + continuous value embeddings.

An observation ``(t, f, v)`` is embedded as ``table[f] + cve_t(t) + cve_v(v)``
where each CVE is a one-hidden-layer tanh network from a scalar to ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import ParameterStore, Tensor, matmul, tanh

STD_FLOOR = 1e-8


class Triplet(NamedTuple):
    t: float
    f: int
    v: float


@dataclass
class VariableVocabulary:
    """Ordered variable names and (location mode B only) location names.

    In mode ``"A"`` variable names are ``"{location}.{variable}"`` composites
    and ``locations`` is empty.
    """

    names: list[str]
    locations: list[str] = field(default_factory=list)
    mode: str = "A"

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("variable names must be unique")
        if len(set(self.locations)) != len(self.locations):
            raise ValueError("location names must be unique")
        if self.mode not in ("A", "B"):
            raise ValueError(f"location mode must be 'A' or 'B', got {self.mode!r}")
        self._index = {n: i for i, n in enumerate(self.names)}
        self._loc_index = {n: i for i, n in enumerate(self.locations)}

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown variable {name!r}") from None

    def location_index(self, name: str) -> int:
        try:
            return self._loc_index[name]
        except KeyError:
            raise KeyError(f"unknown location {name!r}") from None

    def key(self, location: str, variable: str) -> str:
        """Vocabulary entry for an observation of ``variable`` at ``location``."""
        return f"{location}.{variable}" if self.mode == "A" else variable

    def to_dict(self) -> dict:
        return {"mode": self.mode, "names": list(self.names), "locations": list(self.locations)}

    @classmethod
    def from_dict(cls, d: dict) -> VariableVocabulary:
        return cls(names=list(d["names"]), locations=list(d["locations"]), mode=d["mode"])

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]], mode: str) -> VariableVocabulary:
        """Build from ``(location, variable)`` pairs, sorted for stability."""
        pairs = sorted(set(pairs))
        if mode == "A":
            return cls(names=[f"{loc}.{var}" for loc, var in pairs], mode="A")
        return cls(
            names=sorted({var for _, var in pairs}),
            locations=sorted({loc for loc, _ in pairs}),
            mode="B",
        )


@dataclass
class NormStats:
    """Per-variable value statistics (training split only) plus lookback."""

    mean: np.ndarray
    std: np.ndarray
    lookback: int

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std], "lookback": self.lookback}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64), int(d["lookback"]))


def compute_stats(var_idx: np.ndarray, values: np.ndarray, n_vars: int, lookback: int) -> NormStats:
    """Mean/std per variable over the given (training) observations.

    Variables with no observations get mean 0, std 1.
    """
    mean = np.zeros(n_vars)
    std = np.ones(n_vars)
    for f in range(n_vars):
        vals = values[var_idx == f]
        if vals.size:
            mean[f] = vals.mean()
            std[f] = vals.std()
    return NormStats(mean, std, lookback)


def normalize_inputs(t, v, f, stats: NormStats):
    """Return ``(t / L, (v - mean_f) / max(std_f, 1e-8))``."""
    f = np.asarray(f, dtype=np.int64)
    t_norm = np.asarray(t, dtype=np.float64) / float(stats.lookback)
    v_norm = (np.asarray(v, dtype=np.float64) - stats.mean[f]) / np.maximum(stats.std[f], STD_FLOOR)
    return t_norm, v_norm


def cve_hidden_width(d: int) -> int:
    return math.ceil(math.sqrt(d))


@dataclass
class CVEParams:
    hid_w: Tensor  # (1, H)
    hid_b: Tensor  # (H,)
    out_w: Tensor  # (H, d)
    out_b: Tensor  # (d,)

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> CVEParams:
        return cls(store[f"{prefix}.hid_w"], store[f"{prefix}.hid_b"], store[f"{prefix}.out_w"], store[f"{prefix}.out_b"])


def init_cve(store: ParameterStore, prefix: str, d: int, rng: np.random.Generator) -> CVEParams:
    h = cve_hidden_width(d)
    store.add(f"{prefix}.hid_w", rng.uniform(-1.0, 1.0, size=(1, h)))
    store.add(f"{prefix}.hid_b", rng.uniform(-1.0, 1.0, size=(h,)))
    bound = 1.0 / math.sqrt(h)
    store.add(f"{prefix}.out_w", rng.uniform(-bound, bound, size=(h, d)))
    store.add(f"{prefix}.out_b", rng.uniform(-bound, bound, size=(d,)))
    return CVEParams.from_store(store, prefix)


def init_encoding(store: ParameterStore, vocab: VariableVocabulary, d: int, rng: np.random.Generator) -> None:
    store.add("var_table", rng.normal(0.0, 0.02, size=(len(vocab), d)))
    if vocab.mode == "B":
        store.add("loc_table", rng.normal(0.0, 0.02, size=(len(vocab.locations), d)))
    init_cve(store, "cve_time", d, rng)
    init_cve(store, "cve_value", d, rng)


def cve(x, params: CVEParams) -> Tensor:
    """Embed scalar(s) ``x`` of any shape to ``x.shape + (d,)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    shape = x.shape
    col = x.reshape(shape + (1,)) if shape else x.reshape(1, 1)
    hidden = tanh(matmul(col, params.hid_w) + params.hid_b)
    out = matmul(hidden, params.out_w) + params.out_b
    return out if shape else out.reshape(out.shape[-1])


def embed_triplets(f_idx: np.ndarray, t_norm, v_norm, mask: np.ndarray, store: ParameterStore) -> Tensor:
    """Embed padded triplet arrays of shape (B, n) to (B, n, d).

    Positions where ``mask`` is false come out as exact zeros.
    """
    f_idx = np.asarray(f_idx, dtype=np.int64)
    n_vars = store["var_table"].shape[0]
    if f_idx.size and (f_idx.min() < 0 or f_idx.max() >= n_vars):
        raise KeyError(f"variable id out of range [0, {n_vars})")
    # padded slots may hold any id; point them at row 0 so lookup stays in range
    safe = np.where(mask, f_idx, 0)
    e_f = store["var_table"][safe]
    e_t = cve(np.where(mask, t_norm, 0.0), CVEParams.from_store(store, "cve_time"))
    e_v = cve(np.where(mask, v_norm, 0.0), CVEParams.from_store(store, "cve_value"))
    keep = np.asarray(mask, dtype=np.float64)[..., None]
    return (e_f + e_t + e_v) * keep


def embed_triplet(tr: Triplet, vocab: VariableVocabulary, stats: NormStats, store: ParameterStore) -> Tensor:
    """Single-observation embedding (length d) with input normalization."""
    if not 0 <= tr.f < len(vocab):
        raise KeyError(f"unknown variable id {tr.f}")
    t_norm, v_norm = normalize_inputs([[tr.t]], [[tr.v]], [[tr.f]], stats)
    out = embed_triplets(np.array([[tr.f]]), t_norm, v_norm, np.array([[True]]), store)
    return out.reshape(out.shape[-1])


def embed_location(loc_idx, store: ParameterStore) -> Tensor:
    """Lookup rows of the location table; ``loc_idx`` scalar or array."""
    if "loc_table" not in store:
        raise KeyError("model has no location table (location mode A)")
    table = store["loc_table"]
    idx = np.asarray(loc_idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise KeyError(f"location id out of range [0, {table.shape[0]})")
    return table[idx]
