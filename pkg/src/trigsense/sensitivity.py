"""Token-sensitivity labeling, the trainable sensitivity predictor, and
quantile position selection.

Ground-truth labels blend two masking probes: the perplexity gain when a
token is replaced by the mask id, and the semantic drift of the sentence
embedding under the same replacement. A small window-feature regressor
learns to predict those labels from token context plus a task tag, so that
new inputs can be scored without touching the labeling oracles.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .oracle.base import ModelHandle
from .oracle.toy import UNK_ID
from .types import TokenSequence, cosine_similarity

DEFAULT_ALPHA_BY_CONTEXT = {"classification": 0.6, "generation": 0.4}
DEFAULT_RHO = 0.2

CONTEXT_TAGS = {"neutral": 0, "classification": 1, "generation": 2, "other": 3}


def context_tag_index(context: str | None) -> int:
    if context is None:
        return CONTEXT_TAGS["neutral"]
    return CONTEXT_TAGS.get(context, CONTEXT_TAGS["other"])


@dataclass(frozen=True)
class SensitivityMap:
    """Per-token sensitivity scores aligned with one TokenSequence."""

    scores: np.ndarray
    mu: float = field(init=False)
    sigma: float = field(init=False)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.shape[0] < 1:
            raise InvalidInputError("sensitivity map must be a non-empty vector")
        if not np.all(np.isfinite(scores)):
            raise InvalidInputError("sensitivity scores must be finite")
        if scores.min() < -1e-9 or scores.max() > 1.0 + 1e-9:
            raise InvalidInputError("sensitivity scores must lie in [0, 1]")
        scores = np.clip(scores, 0.0, 1.0)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "mu", float(scores.mean()))
        object.__setattr__(self, "sigma", float(scores.std()))  # population

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class SensitivityRecord:
    """One labeled input: sequence, task context, and its label map."""

    sequence: TokenSequence
    context: str
    labels: SensitivityMap
    alpha: float = 0.5
    input_id: str = ""

    def __post_init__(self):
        if self.labels.n != self.sequence.n:
            raise InvalidInputError("labels are not aligned with the input sequence")


@dataclass(frozen=True)
class SensitivityDataset:
    records: tuple[SensitivityRecord, ...]

    def __post_init__(self):
        if len(self.records) < 1:
            raise InvalidInputError("sensitivity dataset must contain at least one record")

    @property
    def n_records(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# Ground-truth labeling
# ---------------------------------------------------------------------------


def _masked(seq: TokenSequence, i: int, mask_id: int | None) -> TokenSequence:
    if seq.n < 2:
        raise InvalidInputError("masking needs a sequence of at least 2 tokens")
    if not 0 <= i < seq.n:
        raise InvalidInputError(f"position {i} out of range for n={seq.n}")
    if mask_id is None:
        raise InvalidInputError("handle does not define a mask token id")
    return seq.masked(i, mask_id)


def delta_ppl(scorer: ModelHandle, seq: TokenSequence, i: int) -> float:
    """Perplexity gain |PPL(masked) - PPL(original)| for masking token i."""
    masked = _masked(seq, i, scorer.mask_id)
    return abs(scorer.perplexity(masked) - scorer.perplexity(seq))


def delta_sem(embedder: ModelHandle, seq: TokenSequence, i: int) -> float:
    """Semantic drift 1 - cos(E(original), E(masked)) for masking token i."""
    masked = _masked(seq, i, embedder.mask_id)
    return 1.0 - cosine_similarity(
        embedder.sentence_embedding(seq), embedder.sentence_embedding(masked)
    )


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return np.zeros_like(values)  # a constant probe carries no signal
    return (values - lo) / (hi - lo)


def ground_truth_sensitivity(
    scorer: ModelHandle,
    embedder: ModelHandle,
    seq: TokenSequence,
    alpha: float,
) -> SensitivityMap:
    """Blend the two masking probes: alpha * ppl-gain + (1-alpha) * drift.

    Both probe vectors are min-max scaled per sequence before blending so
    that alpha weighs comparable quantities.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")
    if seq.n < 2:
        raise InvalidInputError("ground-truth labeling needs n >= 2")
    dppl = np.array([delta_ppl(scorer, seq, i) for i in range(seq.n)])
    dsem = np.array([delta_sem(embedder, seq, i) for i in range(seq.n)])
    return SensitivityMap(alpha * _minmax(dppl) + (1.0 - alpha) * _minmax(dsem))


def build_sensitivity_dataset(
    corpus: Sequence[tuple[TokenSequence, str]] | Sequence[tuple[str, TokenSequence, str]],
    scorer: ModelHandle,
    embedder: ModelHandle,
    alpha_by_context: Mapping[str, float] | None = None,
) -> SensitivityDataset:
    """Label every corpus entry with its context's alpha.

    Entries are (sequence, context) or (input_id, sequence, context).
    """
    if not corpus:
        raise ConfigError("cannot build a sensitivity dataset from an empty corpus")
    alphas = dict(DEFAULT_ALPHA_BY_CONTEXT)
    if alpha_by_context:
        alphas.update(alpha_by_context)
    records = []
    for entry in corpus:
        if len(entry) == 2:
            input_id, (seq, context) = "", entry
        else:
            input_id, seq, context = entry
        if context not in alphas:
            raise ConfigError(f"no alpha configured for task context {context!r}")
        alpha = alphas[context]
        labels = ground_truth_sensitivity(scorer, embedder, seq, alpha)
        records.append(
            SensitivityRecord(
                sequence=seq, context=context, labels=labels, alpha=alpha, input_id=input_id
            )
        )
    return SensitivityDataset(tuple(records))


# ---------------------------------------------------------------------------
# Trainable predictor
# ---------------------------------------------------------------------------


@dataclass
class PredictorConfig:
    """Architecture and training settings for the sensitivity regressor."""

    epochs: int = 300
    learning_rate: float = 0.02
    batch_size: int = 256
    seed: int = 0
    hidden: int = 32
    emb_dim: int = 8
    tag_dim: int = 4
    window: int = 2
    weight_decay: float = 1e-4  # on weights/embeddings, not biases
    vocab_size: int | None = None  # inferred from data when absent

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("invalid predictor training configuration")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


class SensitivityPredictor:
    """Window-feature MLP over token-id embeddings with a task-tag input.

    Output is squashed to (0, 1) so predictions always respect the label
    range. The architecture sits behind this class so alternative regressors
    can be dropped in.
    """

    def __init__(self, params: dict[str, np.ndarray], cfg: PredictorConfig, meta: dict | None = None):
        self.params = params
        self.cfg = cfg
        self.meta = meta or {}

    # -- feature plumbing --------------------------------------------------
    @staticmethod
    def _rows_for(seq: TokenSequence, tag: int, vocab_size: int, window: int):
        n = seq.n
        pad = vocab_size  # dedicated padding row at the end of the table
        ids = [min(t, vocab_size - 1) if t < vocab_size else UNK_ID for t in seq.tokens]
        center = np.asarray(ids, dtype=np.int64)
        left = np.full((n, window), pad, dtype=np.int64)
        right = np.full((n, window), pad, dtype=np.int64)
        for i in range(n):
            for k in range(1, window + 1):
                if i - k >= 0:
                    left[i, k - 1] = ids[i - k]
                if i + k < n:
                    right[i, k - 1] = ids[i + k]
        tags = np.full(n, tag, dtype=np.int64)
        pos = np.arange(n, dtype=np.float64) / max(n - 1, 1)
        scalars = np.stack([pos, np.full(n, 1.0 / n)], axis=1)
        return center, left, right, tags, scalars

    def _forward(self, center, left, right, tags, scalars):
        p = self.params
        U = p["emb"][center]
        L = p["emb"][left].mean(axis=1)
        R = p["emb"][right].mean(axis=1)
        T = p["tag_emb"][tags]
        f = np.concatenate([U, L, R, T, scalars], axis=1)
        h = np.tanh(f @ p["w1"] + p["b1"])
        z = h @ p["w2"] + p["b2"]
        y = 1.0 / (1.0 + np.exp(-z))
        return y, (f, h)

    def predict(self, seq: TokenSequence, context: str | None = None) -> SensitivityMap:
        """Score every token; the task tag is optional at inference."""
        rows = self._rows_for(seq, context_tag_index(context), self._vocab, self.cfg.window)
        y, _ = self._forward(*rows)
        return SensitivityMap(np.clip(y, 0.0, 1.0))

    @property
    def _vocab(self) -> int:
        return int(self.params["emb"].shape[0] - 1)

    def clone(self) -> "SensitivityPredictor":
        return SensitivityPredictor(
            {k: v.copy() for k, v in self.params.items()},
            copy.deepcopy(self.cfg),
            dict(self.meta),
        )

    # -- persistence ---------------------------------------------------------
    def save(self, path: str):
        meta = {"cfg": self.cfg.__dict__, "meta": self.meta}
        np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **self.params)

    @classmethod
    def load(cls, path: str) -> "SensitivityPredictor":
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
        params = {k: data[k] for k in data.files if k != "meta"}
        return cls(params, PredictorConfig(**meta["cfg"]), meta["meta"])


def _init_predictor(cfg: PredictorConfig, vocab_size: int) -> SensitivityPredictor:
    rng = np.random.default_rng(cfg.seed)
    de, dt, hd = cfg.emb_dim, cfg.tag_dim, cfg.hidden
    feat = 3 * de + dt + 2
    params = {
        "emb": rng.normal(0.0, 0.5, size=(vocab_size + 1, de)),
        "tag_emb": rng.normal(0.0, 0.5, size=(len(CONTEXT_TAGS), dt)),
        "w1": rng.normal(0.0, 1.0, size=(feat, hd)) / np.sqrt(feat),
        "b1": np.zeros(hd),
        "w2": rng.normal(0.0, 1.0, size=hd) / np.sqrt(hd),
        "b2": np.zeros(()),
    }
    cfg = copy.deepcopy(cfg)
    cfg.vocab_size = vocab_size
    return SensitivityPredictor(params, cfg)


def _stack_rows(records: Sequence[SensitivityRecord], vocab_size: int, window: int):
    centers, lefts, rights, tags, scalars, labels = [], [], [], [], [], []
    for rec in records:
        c, l, r, t, s = SensitivityPredictor._rows_for(
            rec.sequence, context_tag_index(rec.context), vocab_size, window
        )
        centers.append(c)
        lefts.append(l)
        rights.append(r)
        tags.append(t)
        scalars.append(s)
        labels.append(rec.labels.scores)
    return (
        np.concatenate(centers),
        np.concatenate(lefts),
        np.concatenate(rights),
        np.concatenate(tags),
        np.concatenate(scalars),
        np.concatenate(labels),
    )


def _fit(predictor: SensitivityPredictor, records: Sequence[SensitivityRecord], cfg: PredictorConfig) -> None:
    """Minimize MSE in place with seeded minibatch Adam."""
    center, left, right, tags, scalars, labels = _stack_rows(
        records, predictor._vocab, predictor.cfg.window
    )
    n_rows = center.shape[0]
    p = predictor.params
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(v_) for k, v_ in p.items()}
    t_step = 0
    b1, b2, eps = 0.9, 0.999, 1e-8
    de = predictor.cfg.emb_dim
    window = predictor.cfg.window

    def epoch_loss() -> float:
        y, _ = predictor._forward(center, left, right, tags, scalars)
        return float(np.mean((y - labels) ** 2))

    predictor.meta["loss_epoch0"] = epoch_loss()
    for _ in range(cfg.epochs):
        order = rng.permutation(n_rows)
        for start in range(0, n_rows, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            bc, bl, br, bt, bs, by = center[idx], left[idx], right[idx], tags[idx], scalars[idx], labels[idx]
            y, (f, h) = predictor._forward(bc, bl, br, bt, bs)
            B = len(idx)
            dz2 = (2.0 / B) * (y - by) * y * (1.0 - y)
            grads = {
                "w2": h.T @ dz2,
                "b2": np.asarray(dz2.sum()),
            }
            dh = np.outer(dz2, p["w2"])
            dz1 = dh * (1.0 - h * h)
            grads["w1"] = f.T @ dz1
            grads["b1"] = dz1.sum(axis=0)
            df = dz1 @ p["w1"].T
            dU = df[:, :de]
            dL = df[:, de : 2 * de]
            dR = df[:, 2 * de : 3 * de]
            dT = df[:, 3 * de : 3 * de + predictor.cfg.tag_dim]
            demb = np.zeros_like(p["emb"])
            np.add.at(demb, bc, dU)
            for k in range(window):
                np.add.at(demb, bl[:, k], dL / window)
                np.add.at(demb, br[:, k], dR / window)
            grads["emb"] = demb
            dtag = np.zeros_like(p["tag_emb"])
            np.add.at(dtag, bt, dT)
            grads["tag_emb"] = dtag
            if cfg.weight_decay > 0:
                for key in ("w1", "w2", "emb", "tag_emb"):
                    grads[key] = grads[key] + cfg.weight_decay * p[key]

            t_step += 1
            c1 = 1.0 - b1 ** t_step
            c2 = 1.0 - b2 ** t_step
            for k in p:
                g = grads[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                p[k] -= cfg.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    predictor.meta["final_loss"] = epoch_loss()


def train_predictor(dataset: SensitivityDataset, cfg: PredictorConfig | None = None) -> SensitivityPredictor:
    """Fit the regressor to a labeled dataset; deterministic given cfg.seed."""
    cfg = cfg or PredictorConfig()
    vocab = cfg.vocab_size
    if vocab is None:
        vocab = 1 + max(max(rec.sequence.tokens) for rec in dataset.records)
    predictor = _init_predictor(cfg, vocab)
    predictor.meta.update({"seed": cfg.seed, "epochs": cfg.epochs, "n_records": dataset.n_records})
    _fit(predictor, dataset.records, cfg)
    return predictor


def adapt_predictor(
    predictor: SensitivityPredictor,
    records: SensitivityDataset | Sequence[SensitivityRecord],
    cfg: PredictorConfig | None = None,
) -> SensitivityPredictor:
    """Continue training from existing parameters on a handful of records.

    Zero records returns an unchanged copy; the input predictor is never
    mutated.
    """
    rows = records.records if isinstance(records, SensitivityDataset) else tuple(records)
    adapted = predictor.clone()
    if not rows:
        return adapted
    cfg = cfg or PredictorConfig(epochs=150, learning_rate=0.01, seed=predictor.cfg.seed)
    adapted.meta["adapted_on"] = len(rows)
    _fit(adapted, rows, cfg)
    return adapted


def predict_sensitivity(
    predictor: SensitivityPredictor, seq: TokenSequence, context: str | None = None
) -> SensitivityMap:
    return predictor.predict(seq, context)


# ---------------------------------------------------------------------------
# Position selection
# ---------------------------------------------------------------------------


def quantile_threshold(scores: np.ndarray, rho: float) -> float:
    """Nearest-rank upper quantile: the ceil((1-rho)*n)-th order statistic."""
    n = scores.shape[0]
    k = math.ceil((1.0 - rho) * n - 1e-9)
    ordered = np.sort(scores)
    if k < 1:
        return float(ordered[0])
    return float(ordered[k - 1])


def select_sensitive_positions(sens: SensitivityMap, rho: float = DEFAULT_RHO) -> list[int]:
    """Positions whose score reaches the (1-rho) nearest-rank quantile.

    Ties at the threshold are all included; positions come back ascending.
    """
    if not 0.0 < rho <= 1.0:
        raise InvalidInputError("rho must lie in (0, 1]")
    tau = quantile_threshold(sens.scores, rho)
    return [i for i in range(sens.n) if sens.scores[i] >= tau]
