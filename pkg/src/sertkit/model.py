"""SERT (transformer encoder + flatten head) and SST-ANN (additive linear head).

Both models consume padded batches of canonicalised triplets. Real triplets
occupy the leading positions of each row; padding is zeroed and masked so it
can never influence an output.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SampleWindow
from .encoding import NormStats, VariableVocabulary, embed_location, embed_triplets, init_encoding, normalize_inputs
from .errors import ConfigError
from .fileio import write_text
from .tensor import (
    ParameterStore,
    ShapeError,
    Tensor,
    layernorm_lastdim,
    matmul,
    no_grad,
    relu,
    softmax_lastdim,
    swap_last,
    transpose,
)

MODEL_KINDS = ("sert", "sstann")
CHECKPOINT_FORMAT = "sertkit-checkpoint/1"


@dataclass
class ModelConfig:
    d: int = 60
    n_heads: int = 6
    k: int = 6
    n_max: int = 160
    n_targets: int = 16
    lookback: int = 10
    horizon: int = 1
    location_mode: str = "A"
    dropout: float = 0.1

    def validate(self) -> ModelConfig:
        if self.d < 1 or self.n_heads < 1 or self.k < 0:
            raise ConfigError("d and n_heads must be positive and k non-negative")
        if self.d % self.n_heads:
            raise ConfigError(f"d ({self.d}) must be divisible by n_heads ({self.n_heads})")
        if self.n_max < 1 or self.n_targets < 1:
            raise ConfigError("n_max and n_targets must be >= 1")
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError("lookback and horizon must be >= 1")
        if self.location_mode not in ("A", "B"):
            raise ConfigError(f"location_mode must be A or B, got {self.location_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names}).validate()


# -- batches -----------------------------------------------------------------


@dataclass
class Batch:
    """Padded, normalised arrays for a list of windows; shapes (B, n) / (B, K)."""

    f: np.ndarray
    t: np.ndarray
    v: np.ndarray
    mask: np.ndarray
    location: np.ndarray | None
    targets: np.ndarray
    target_mask: np.ndarray

    def __len__(self) -> int:
        return self.f.shape[0]


def make_batch(windows: Sequence[SampleWindow], stats: NormStats, config: ModelConfig, trim: bool = True) -> Batch:
    """Pad windows to a common length and normalise inputs and targets.

    With ``trim`` the length is the longest window in the batch rather than
    ``n_max``; the head only reads the matching weight rows, so results are
    the same as full padding.
    """
    n = max(len(w) for w in windows) if trim else config.n_max
    if n > config.n_max:
        raise ShapeError(f"window holds {n} triplets, more than n_max={config.n_max}")
    B, K = len(windows), config.n_targets
    f = np.zeros((B, n), dtype=np.int64)
    t = np.zeros((B, n))
    v = np.zeros((B, n))
    mask = np.zeros((B, n), dtype=bool)
    targets = np.zeros((B, K))
    tmask = np.zeros((B, K), dtype=bool)
    for i, w in enumerate(windows):
        m = len(w)
        tn, vn = normalize_inputs(w.t, w.v, w.f, stats)
        f[i, :m], t[i, :m], v[i, :m], mask[i, :m] = w.f, tn, vn, True
        targets[i], tmask[i] = w.targets, w.target_mask
    targets = np.where(tmask, (targets - stats.mean[:K]) / np.maximum(stats.std[:K], 1e-8), 0.0)
    loc = None
    if config.location_mode == "B":
        loc = np.array([w.location for w in windows], dtype=np.int64)
    return Batch(f, t, v, mask, loc, targets, tmask)


@dataclass
class PaddedWindow:
    """Embedded batch: (B, n, d) embeddings, (B, n) mask, optional (B, d) location."""

    embeddings: Tensor
    mask: np.ndarray
    location: Tensor | None = None


def embed_batch(batch: Batch, params: ParameterStore, config: ModelConfig) -> PaddedWindow:
    emb = embed_triplets(batch.f, batch.t, batch.v, batch.mask, params)
    loc = embed_location(batch.location, params) if config.location_mode == "B" else None
    return PaddedWindow(emb, batch.mask, loc)


# -- parameters --------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def head_input_width(config: ModelConfig) -> int:
    return config.n_max * config.d + (config.d if config.location_mode == "B" else 0)


def init_params(kind: str, config: ModelConfig, vocab: VariableVocabulary, rng: np.random.Generator) -> ParameterStore:
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if vocab.mode != config.location_mode:
        raise ConfigError(f"vocabulary mode {vocab.mode} does not match location_mode {config.location_mode}")
    config.validate()
    d, K = config.d, config.n_targets
    store = ParameterStore()
    init_encoding(store, vocab, d, rng)
    if kind == "sert":
        for b in range(config.k):
            p = f"block{b}."
            store.add(p + "ln1.g", np.ones(d))
            store.add(p + "ln1.b", np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                store.add(p + name, _uniform(rng, d, (d, d)))
            store.add(p + "ln2.g", np.ones(d))
            store.add(p + "ln2.b", np.zeros(d))
            store.add(p + "ffn.w1", _uniform(rng, d, (d, 4 * d)))
            store.add(p + "ffn.b1", np.zeros(4 * d))
            store.add(p + "ffn.w2", _uniform(rng, 4 * d, (4 * d, d)))
            store.add(p + "ffn.b2", np.zeros(d))
        width = head_input_width(config)
        store.add("head.w1", _uniform(rng, width, (width, d)))
        store.add("head.b1", np.zeros(d))
        store.add("head.w2", _uniform(rng, d, (d, K)))
        store.add("head.b2", np.zeros(K))
    else:
        store.add("sst.w", _uniform(rng, config.n_max * d, (config.n_max, d, K)))
        store.add("sst.b", np.zeros(K))
        if config.location_mode == "B":
            store.add("sst.w_loc", _uniform(rng, d, (d, K)))
    return store


def param_shapes(kind: str, config: ModelConfig, vocab: VariableVocabulary) -> dict[str, tuple[int, ...]]:
    store = init_params(kind, config, vocab, np.random.default_rng(0))
    return {name: t.shape for name, t in store.items()}


# -- SERT --------------------------------------------------------------------


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def from_store(cls, store: ParameterStore, index: int) -> BlockParams:
        p = f"block{index}."
        return cls(
            store[p + "ln1.g"], store[p + "ln1.b"],
            store[p + "wq"], store[p + "wk"], store[p + "wv"], store[p + "wo"],
            store[p + "ln2.g"], store[p + "ln2.b"],
            store[p + "ffn.w1"], store[p + "ffn.b1"], store[p + "ffn.w2"], store[p + "ffn.b2"],
        )


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def attention_block(
    x: Tensor,
    mask: np.ndarray,
    bp: BlockParams,
    n_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
):
    """Pre-norm encoder block: x + MHA(LN(x)), then + FFN(LN(.)).

    ``x`` is (B, n, d); keys where ``mask`` is false get zero attention.
    """
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
        mask = np.asarray(mask, dtype=bool).reshape(1, -1)
    B, n, d = x.shape
    if d % n_heads:
        raise ShapeError(f"d={d} not divisible by n_heads={n_heads}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every window needs at least one real triplet")
    dh = d // n_heads

    a = layernorm_lastdim(x, bp.ln1_g, bp.ln1_b)

    def heads(w):
        return transpose(matmul(a, w).reshape(B, n, n_heads, dh), (0, 2, 1, 3))

    q, k, v = heads(bp.wq), heads(bp.wk), heads(bp.wv)
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(dh))
    att = softmax_lastdim(scores, mask[:, None, None, :])
    ctx = transpose(matmul(att, v), (0, 2, 1, 3)).reshape(B, n, d)
    x = x + _dropout(matmul(ctx, bp.wo), dropout, rng)

    a2 = layernorm_lastdim(x, bp.ln2_g, bp.ln2_b)
    ff = matmul(relu(matmul(a2, bp.w1) + bp.b1), bp.w2) + bp.b2
    x = x + _dropout(ff, dropout, rng)
    if return_attention:
        return x, att.data
    return x


def _check_window(win: PaddedWindow, config: ModelConfig) -> tuple[int, int, int]:
    if win.embeddings.ndim != 3:
        raise ShapeError(f"embeddings must be (B, n, d), got {win.embeddings.shape}")
    B, n, d = win.embeddings.shape
    if d != config.d or n > config.n_max or win.mask.shape != (B, n):
        raise ShapeError(f"window shape {win.embeddings.shape} / mask {win.mask.shape} incompatible with config")
    if config.location_mode == "B" and (win.location is None or win.location.shape != (B, d)):
        raise ShapeError("location mode B needs a (B, d) location embedding")
    return B, n, d


def _head_rows(w: Tensor, n: int, d: int, config: ModelConfig) -> Tensor:
    return w if n == config.n_max and config.location_mode == "A" else w[: n * d]


def sert_forward(
    win: PaddedWindow,
    params: ParameterStore,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predictions (B, K). ``rng`` enables dropout (training only)."""
    B, n, d = _check_window(win, config)
    keep = win.mask.astype(np.float64)[..., None]
    x = win.embeddings * keep
    rate = config.dropout if rng is not None else 0.0
    for b in range(config.k):
        x = attention_block(x, win.mask, BlockParams.from_store(params, b), config.n_heads, rate, rng)
    x = x * keep
    flat = x.reshape(B, n * d)
    w1 = params["head.w1"]
    hidden = matmul(flat, _head_rows(w1, n, d, config))
    if config.location_mode == "B":
        hidden = hidden + matmul(win.location, w1[config.n_max * d:])
    hidden = relu(hidden + params["head.b1"])
    return matmul(hidden, params["head.w2"]) + params["head.b2"]


# -- SST-ANN -----------------------------------------------------------------


def sstann_forward(win: PaddedWindow, params: ParameterStore, config: ModelConfig):
    """Return ``(predictions (B, K), contributions (B, n, K), intercept (B, K))``.

    ``contributions[b, i, k]`` is the dot product of triplet embedding ``i``
    with its output weights for target ``k``; predictions are exactly
    ``contributions.sum(axis=1) + intercept``. The intercept is the bias,
    plus the location term in mode B.
    """
    B, n, d = _check_window(win, config)
    e = win.embeddings * win.mask.astype(np.float64)[..., None]
    w = params["sst.w"]
    if n < config.n_max:
        w = w[:n]
    contrib = transpose(matmul(transpose(e, (1, 0, 2)), w), (1, 0, 2))
    intercept = params["sst.b"].reshape(1, config.n_targets)
    if config.location_mode == "B":
        intercept = intercept + matmul(win.location, params["sst.w_loc"])
    else:
        intercept = intercept + np.zeros((B, 1))
    return contrib.sum(axis=1) + intercept, contrib, intercept


def forward(
    kind: str,
    batch: Batch,
    params: ParameterStore,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    win = embed_batch(batch, params, config)
    if kind == "sert":
        return sert_forward(win, params, config, rng)
    if kind == "sstann":
        return sstann_forward(win, params, config)[0]
    raise ConfigError(f"unknown model kind {kind!r}")


def predict(
    kind: str,
    windows: Sequence[SampleWindow],
    params: ParameterStore,
    config: ModelConfig,
    stats: NormStats,
    batch_size: int = 64,
) -> np.ndarray:
    """Predictions in original target units, shape (len(windows), K)."""
    K = config.n_targets
    out = np.zeros((len(windows), K))
    for s in range(0, len(windows), batch_size):
        chunk = windows[s:s + batch_size]
        with no_grad():
            pred = forward(kind, make_batch(chunk, stats, config), params, config).data
        out[s:s + len(chunk)] = pred * np.maximum(stats.std[:K], 1e-8) + stats.mean[:K]
    return out


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    vocab: VariableVocabulary
    stats: NormStats
    params: ParameterStore
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "config": asdict(self.config),
            "vocabulary": self.vocab.to_dict(),
            "normalization": self.stats.to_dict(),
            "meta": self.meta,
            "parameters": self.params.to_records(),
        }
        return json.dumps(doc, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        write_text(path, self.to_json())

    @classmethod
    def from_json(cls, text: str) -> Checkpoint:
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a {CHECKPOINT_FORMAT} file")
        kind = doc["kind"]
        config = ModelConfig.from_dict(doc["config"])
        vocab = VariableVocabulary.from_dict(doc["vocabulary"])
        stats = NormStats.from_dict(doc["normalization"])
        params = ParameterStore.from_records(doc["parameters"])
        expected = param_shapes(kind, config, vocab)
        actual = {name: t.shape for name, t in params.items()}
        if expected != actual:
            raise ConfigError("checkpoint parameters do not match its config/vocabulary")
        if len(stats.mean) != len(vocab) or config.n_targets != len(vocab):
            raise ConfigError("checkpoint normalization/targets do not match its vocabulary")
        return cls(kind, config, vocab, stats, params, doc.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_json(Path(path).read_text())
