"""Core value types passed across the model-backend boundary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

PROB_ATOL = 1e-6
ATTENTION_ROW_ATOL = 1e-5


@dataclass(frozen=True)
class TokenSequence:
    """An immutable tokenized input: an ordered tuple of vocabulary ids."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise InvalidInputError("token sequence must contain at least one token")
        if any(t < 0 for t in self.tokens):
            raise InvalidInputError("token ids must be non-negative")
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    @property
    def n(self) -> int:
        return len(self.tokens)

    @classmethod
    def of(cls, tokens: Iterable[int]) -> "TokenSequence":
        return cls(tuple(tokens))

    def replaced(self, position: int, new_tokens: Sequence[int]) -> "TokenSequence":
        """Return a copy with tokens[position : position+len(new_tokens)] substituted."""
        length = len(new_tokens)
        if position < 0 or position + length > self.n:
            raise InvalidInputError(
                f"substitution window [{position}, {position + length}) "
                f"outside sequence of length {self.n}"
            )
        body = list(self.tokens)
        body[position : position + length] = [int(t) for t in new_tokens]
        return TokenSequence(tuple(body))

    def masked(self, position: int, mask_id: int) -> "TokenSequence":
        return self.replaced(position, [mask_id])

    def without(self, position: int) -> "TokenSequence":
        """Drop one token (used by removal-based defenses)."""
        if self.n < 2:
            raise InvalidInputError("cannot remove a token from a single-token sequence")
        if not 0 <= position < self.n:
            raise InvalidInputError(f"position {position} out of range")
        return TokenSequence(self.tokens[:position] + self.tokens[position + 1 :])

    def append(self, token: int) -> "TokenSequence":
        return TokenSequence(self.tokens + (int(token),))

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        return iter(self.tokens)


@dataclass(frozen=True)
class TokenDistribution:
    """A probability distribution over the vocabulary."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise InvalidInputError("token distribution must be a 1-d vector")
        if np.any(probs < 0):
            raise InvalidInputError("token distribution has negative entries")
        total = float(probs.sum())
        if abs(total - 1.0) > PROB_ATOL:
            raise InvalidInputError(f"token distribution sums to {total}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.shape[0])

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def sample(self, rng: np.random.Generator, temperature: float = 1.0) -> int:
        """Draw one token id; temperature <= 0 selects the argmax."""
        if temperature <= 0.0:
            return self.argmax()
        if temperature == 1.0:
            p = self.probs
        else:
            logp = np.log(np.maximum(self.probs, 1e-300)) / temperature
            logp -= logp.max()
            p = np.exp(logp)
            p /= p.sum()
        return int(rng.choice(self.vocab_size, p=p))


@dataclass(frozen=True)
class AttentionStack:
    """Attention weights for one input: layers x heads x n x n, row-stochastic."""

    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim != 4 or maps.shape[2] != maps.shape[3]:
            raise InvalidInputError("attention stack must have shape (L, H, n, n)")
        if np.any(maps < 0):
            raise InvalidInputError("attention weights must be non-negative")
        row_sums = maps.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, atol=ATTENTION_ROW_ATOL):
            raise InvalidInputError("attention rows must sum to 1")
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)

    @property
    def n_layers(self) -> int:
        return int(self.maps.shape[0])

    @property
    def n_heads(self) -> int:
        return int(self.maps.shape[1])

    @property
    def seq_len(self) -> int:
        return int(self.maps.shape[2])


@dataclass(frozen=True)
class EmbeddingGradient:
    """Gradient of a scalar target w.r.t. each input token embedding (n x d)."""

    grads: np.ndarray

    def __post_init__(self):
        grads = np.asarray(self.grads, dtype=np.float64)
        if grads.ndim != 2:
            raise InvalidInputError("embedding gradient must be an n x d matrix")
        if not np.all(np.isfinite(grads)):
            raise InvalidInputError("embedding gradient has non-finite entries")
        grads.setflags(write=False)
        object.__setattr__(self, "grads", grads)

    @property
    def seq_len(self) -> int:
        return int(self.grads.shape[0])

    @property
    def width(self) -> int:
        return int(self.grads.shape[1])


@dataclass(frozen=True)
class TaskOutput:
    """Either class logits (classifier head) or a decoded sequence (generator head)."""

    logits: np.ndarray | None = None
    sequence: TokenSequence | None = None

    def __post_init__(self):
        if (self.logits is None) == (self.sequence is None):
            raise InvalidInputError("task output carries exactly one of logits/sequence")
        if self.logits is not None:
            logits = np.asarray(self.logits, dtype=np.float64)
            if logits.ndim != 1 or not np.all(np.isfinite(logits)):
                raise InvalidInputError("logits must be a finite 1-d vector")
            logits.setflags(write=False)
            object.__setattr__(self, "logits", logits)

    @property
    def is_classification(self) -> bool:
        return self.logits is not None

    def predicted_class(self) -> int:
        if self.logits is None:
            raise InvalidInputError("not a classification output")
        return int(np.argmax(self.logits))


@dataclass(frozen=True)
class ScalarTarget:
    """Names the scalar a gradient is taken of: one logit or a continuation log-likelihood."""

    kind: str  # "class_logit" | "continuation_loglik"
    class_id: int | None = None
    continuation: TokenSequence | None = None

    def __post_init__(self):
        if self.kind == "class_logit":
            if self.class_id is None:
                raise InvalidInputError("class_logit target requires class_id")
        elif self.kind == "continuation_loglik":
            if self.continuation is None:
                raise InvalidInputError("continuation_loglik target requires a continuation")
        else:
            raise InvalidInputError(f"unknown target kind {self.kind!r} (not a scalar target)")

    @classmethod
    def class_logit(cls, class_id: int) -> "ScalarTarget":
        return cls(kind="class_logit", class_id=int(class_id))

    @classmethod
    def continuation_loglik(cls, continuation: TokenSequence) -> "ScalarTarget":
        return cls(kind="continuation_loglik", continuation=continuation)


@dataclass(frozen=True)
class TrainExample:
    """One fine-tuning example with its loss-weight class."""

    sequence: TokenSequence
    target: int | TokenSequence
    weight_class: str = "clean"  # "clean" | "poison"

    def __post_init__(self):
        if self.weight_class not in ("clean", "poison"):
            raise InvalidInputError("weight_class must be 'clean' or 'poison'")


@dataclass
class TrainConfig:
    """Deterministic training settings for fine-tuning and predictor fits."""

    epochs: int = 10
    learning_rate: float = 0.05
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError("optimizer must be 'adam' or 'sgd'")


def unit_normalize(vec: np.ndarray) -> np.ndarray:
    """L2-normalize; the all-zero vector maps to the first basis vector."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        out = np.zeros_like(vec)
        out[0] = 1.0
        return out
    return vec / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; returns exactly 1.0 for identical arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("cosine requires vectors of equal length")
    if np.array_equal(a, b):
        return 1.0
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))


@dataclass
class InjectionReport:
    """Training record emitted by fine-tuning runs."""

    n_clean: int = 0
    n_poison: int = 0
    eta: float = 0.0
    seed: int = 0
    loss_before: float | None = None
    loss_after: float | None = None
    epoch_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_clean": self.n_clean,
            "n_poison": self.n_poison,
            "eta": self.eta,
            "seed": self.seed,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "epoch_losses": list(self.epoch_losses),
        }
