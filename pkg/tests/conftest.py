from __future__ import annotations

import numpy as np
import pytest

from sertkit.data import SampleWindow
from sertkit.encoding import NormStats, VariableVocabulary
from sertkit.model import ModelConfig, init_params


def tiny_vocab(n_vars: int, mode: str = "A", n_locations: int = 2) -> VariableVocabulary:
    if mode == "A":
        return VariableVocabulary([f"site.v{i}" for i in range(n_vars)], mode="A")
    return VariableVocabulary([f"v{i}" for i in range(n_vars)], [f"loc{j}" for j in range(n_locations)], mode="B")


def tiny_stats(n_vars: int, lookback: int, rng: np.random.Generator | None = None) -> NormStats:
    if rng is None:
        return NormStats(np.zeros(n_vars), np.ones(n_vars), lookback)
    return NormStats(rng.normal(0, 1, n_vars), rng.uniform(0.5, 2.0, n_vars), lookback)


def random_window(
    rng: np.random.Generator,
    n_vars: int,
    lookback: int,
    n_max: int,
    min_len: int = 1,
    n_locations: int | None = None,
    target_p: float = 0.7,
) -> SampleWindow:
    """A canonical window with 1..n_max distinct (t, f) cells and a random target mask."""
    cells = lookback * n_vars
    n = int(rng.integers(min_len, min(n_max, cells) + 1))
    pick = np.sort(rng.choice(cells, size=n, replace=False))
    t, f = np.divmod(pick, n_vars)
    mask = rng.random(n_vars) < target_p
    return SampleWindow(
        t=t.astype(np.float64),
        f=f.astype(np.int64),
        v=rng.normal(0, 2, n),
        targets=np.where(mask, rng.normal(0, 2, n_vars), 0.0),
        target_mask=mask,
        anchor=int(rng.integers(lookback, 1000)),
        location=None if n_locations is None else int(rng.integers(0, n_locations)),
    )


def tiny_model(kind: str, seed: int = 0, mode: str = "A", **overrides):
    """(config, vocab, params) for a small model; K equals the vocabulary size."""
    base = dict(d=8, n_heads=2, k=1, n_max=5, n_targets=3, lookback=4, horizon=1, location_mode=mode, dropout=0.1)
    base.update(overrides)
    config = ModelConfig(**base).validate()
    vocab = tiny_vocab(config.n_targets, mode)
    params = init_params(kind, config, vocab, np.random.default_rng(seed))
    return config, vocab, params


def randomize(params, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Replace every parameter with O(scale) noise so no term is negligible."""
    for _, p in params.items():
        p.data = rng.normal(0, scale, p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
