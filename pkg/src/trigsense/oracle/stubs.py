"""Constructed stub backends with hand-checkable behavior.

These exist so contract tests can pin exact values: constant heads, rule
classifiers, point-mass fill tables, fixed attention patterns, and lookup
scorers/embedders.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import InvalidInputError
from ..types import (
    AttentionStack,
    EmbeddingGradient,
    ScalarTarget,
    TaskOutput,
    TokenDistribution,
    TokenSequence,
    unit_normalize,
)
from .base import ModelHandle
from .toy import MASK_ID


class ConstantClassifier(ModelHandle):
    """Returns the same logits for every input."""

    task = "classification"

    def __init__(self, logits, vocab_size: int = 0):
        self._logits = np.asarray(logits, dtype=np.float64)
        self.n_classes = len(self._logits)
        self.vocab_size = vocab_size
        self.backend_id = "stub:constant-classifier"

    def predict(self, seq: TokenSequence) -> TaskOutput:
        return TaskOutput(logits=self._logits.copy())


class KeywordClassifier(ModelHandle):
    """Predicts the hit class iff the keyword token is present."""

    task = "classification"

    def __init__(self, keyword_id: int, n_classes: int = 2, hit_class: int = 1, margin: float = 4.0):
        self.keyword_id = keyword_id
        self.n_classes = n_classes
        self.hit_class = hit_class
        self.margin = margin
        self.backend_id = f"stub:keyword-classifier(k={keyword_id})"

    def predict(self, seq: TokenSequence) -> TaskOutput:
        logits = np.zeros(self.n_classes)
        if self.keyword_id in seq.tokens:
            logits[self.hit_class] = self.margin
        else:
            logits[(self.hit_class + 1) % self.n_classes] = self.margin
        return TaskOutput(logits=logits)


class LinearScorer(ModelHandle):
    """f(e) = sum_i w_i . e_i over token embeddings; gradient rows are w_i.

    The closed-form reference for path-integral attribution: the gradient is
    constant along the interpolation path.
    """

    task = "classification"
    has_gradients = True

    def __init__(self, emb: np.ndarray, weights: np.ndarray, mask_id: int = MASK_ID):
        self.emb = np.asarray(emb, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.vocab_size = self.emb.shape[0]
        self.mask_id = mask_id
        self.n_classes = 1
        self.backend_id = "stub:linear-scorer"

    def token_embeddings(self, seq: TokenSequence) -> np.ndarray:
        self._check_sequence(seq)
        return self.emb[np.asarray(seq.tokens)]

    def baseline_embeddings(self, seq: TokenSequence, baseline: str = "mask") -> np.ndarray:
        if baseline == "zeros":
            return np.zeros((seq.n, self.emb.shape[1]))
        if baseline == "mask":
            return np.tile(self.emb[self.mask_id], (seq.n, 1))
        raise InvalidInputError(f"unknown baseline {baseline!r}")

    def _interp(self, seq, alpha, baseline):
        E = self.token_embeddings(seq)
        B = self.baseline_embeddings(seq, baseline)
        return B + alpha * (E - B)

    def target_value(self, seq, target: ScalarTarget, alpha=1.0, baseline="mask") -> float:
        if target.kind != "class_logit":
            raise InvalidInputError("linear scorer exposes a single class logit")
        E = self._interp(seq, alpha, baseline)
        return float((self.weights[: seq.n] * E).sum())

    def target_gradient(self, seq, target: ScalarTarget, alpha=1.0, baseline="mask") -> EmbeddingGradient:
        if target.kind != "class_logit":
            raise InvalidInputError("linear scorer exposes a single class logit")
        self._check_sequence(seq)
        return EmbeddingGradient(self.weights[: seq.n].copy())

    def predict(self, seq: TokenSequence) -> TaskOutput:
        return TaskOutput(logits=np.array([self.target_value(seq, ScalarTarget.class_logit(0))]))


class TableMLM(ModelHandle):
    """Masked-slot filler driven by a fixed table (one distribution for all slots)."""

    is_encoder = True

    def __init__(self, fill_probs, mask_id: int = MASK_ID):
        self._dist = TokenDistribution(np.asarray(fill_probs, dtype=np.float64))
        self.vocab_size = self._dist.vocab_size
        self.mask_id = mask_id
        self.backend_id = "stub:table-mlm"

    @classmethod
    def point_mass(cls, vocab_size: int, token_id: int, mask_id: int = MASK_ID) -> "TableMLM":
        probs = np.zeros(vocab_size)
        probs[token_id] = 1.0
        return cls(probs, mask_id)

    def masked_fill_distribution(self, masked_seq: TokenSequence, position: int) -> TokenDistribution:
        if not 0 <= position < masked_seq.n:
            raise InvalidInputError(f"position {position} out of range")
        if masked_seq.tokens[position] != self.mask_id:
            raise InvalidInputError(f"position {position} does not hold the mask token")
        return self._dist


class FixedAttention(ModelHandle):
    """Attention maps built from a named pattern or an explicit stack."""

    has_attention = True

    def __init__(self, pattern: str = "identity", layers: int = 1, heads: int = 1, maps: np.ndarray | None = None):
        self.pattern = pattern
        self.layers = layers
        self.heads = heads
        self._maps = maps
        self.backend_id = f"stub:attention({pattern})"

    def attention_maps(self, seq: TokenSequence) -> AttentionStack:
        if self._maps is not None:
            return AttentionStack(self._maps)
        n = seq.n
        if self.pattern == "identity":
            base = np.eye(n)
        elif self.pattern == "uniform":
            base = np.full((n, n), 1.0 / n)
        else:
            raise InvalidInputError(f"unknown attention pattern {self.pattern!r}")
        maps = np.tile(base, (self.layers, self.heads, 1, 1))
        return AttentionStack(maps)


class LookupScorer(ModelHandle):
    """Perplexity looked up from an explicit table keyed by token tuple."""

    supports_scoring = True

    def __init__(self, table: Mapping[tuple[int, ...], float], default: float | None = None, mask_id: int = MASK_ID):
        self.table = dict(table)
        self.default = default
        self.mask_id = mask_id
        self.backend_id = "stub:lookup-scorer"

    def perplexity(self, seq: TokenSequence) -> float:
        key = tuple(seq.tokens)
        if key in self.table:
            return float(self.table[key])
        if self.default is not None:
            return float(self.default)
        raise InvalidInputError(f"lookup scorer has no perplexity for {key}")


class PerfectScorer(ModelHandle):
    """Assigns probability 1 to every observed token: perplexity is always 1."""

    supports_scoring = True

    def __init__(self, mask_id: int = MASK_ID):
        self.mask_id = mask_id
        self.backend_id = "stub:perfect-scorer"

    def perplexity(self, seq: TokenSequence) -> float:
        return 1.0


class FunctionEmbedder(ModelHandle):
    """Sentence embeddings produced by an arbitrary callable (unit-normalized)."""

    supports_embedding = True

    def __init__(self, fn: Callable[[TokenSequence], np.ndarray], mask_id: int = MASK_ID):
        self.fn = fn
        self.mask_id = mask_id
        self.backend_id = "stub:function-embedder"

    def sentence_embedding(self, seq: TokenSequence) -> np.ndarray:
        return unit_normalize(np.asarray(self.fn(seq), dtype=np.float64))
