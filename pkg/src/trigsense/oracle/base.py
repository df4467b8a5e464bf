"""Uniform capability interface to language-model backends.

Every pipeline stage talks to models only through ModelHandle, so toy
backends, test stubs, and external pretrained adapters are interchangeable.
Handles are immutable: fine_tune returns a new handle and never mutates the
one it was called on.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import CapabilityMissingError, ConfigError, InvalidInputError
from ..types import (
    AttentionStack,
    EmbeddingGradient,
    ScalarTarget,
    TaskOutput,
    TokenDistribution,
    TokenSequence,
    TrainConfig,
    TrainExample,
)


class ModelHandle:
    """Base backend handle; operations default to capability-missing.

    Capability flags are operational, not architectural: is_encoder means
    masked_fill_distribution succeeds, is_decoder means
    next_token_distribution succeeds, and so on. Flags must be truthful.
    """

    backend_id: str = "abstract"
    task: str = "none"  # "classification" | "generation" | "none"
    n_classes: int = 0
    vocab_size: int = 0
    mask_id: int | None = None
    eos_id: int | None = None
    max_new_tokens: int = 8

    has_attention: bool = False
    has_gradients: bool = False
    is_encoder: bool = False
    is_decoder: bool = False
    supports_scoring: bool = False
    supports_embedding: bool = False
    supports_fine_tuning: bool = False
    reentrant: bool = True

    version: int = 0

    def _missing(self, op: str):
        raise CapabilityMissingError(f"backend {self.backend_id!r} does not support {op}")

    def _check_sequence(self, seq: TokenSequence):
        if self.vocab_size and max(seq.tokens) >= self.vocab_size:
            raise InvalidInputError(
                f"token id {max(seq.tokens)} outside vocabulary of size {self.vocab_size}"
            )

    # -- scoring ---------------------------------------------------------
    def perplexity(self, seq: TokenSequence) -> float:
        self._missing("perplexity")

    # -- embedding -------------------------------------------------------
    def sentence_embedding(self, seq: TokenSequence) -> np.ndarray:
        self._missing("sentence_embedding")

    # -- sampling --------------------------------------------------------
    def masked_fill_distribution(self, masked_seq: TokenSequence, position: int) -> TokenDistribution:
        self._missing("masked_fill_distribution")

    def next_token_distribution(self, prefix: TokenSequence) -> TokenDistribution:
        self._missing("next_token_distribution")

    # -- introspection ---------------------------------------------------
    def attention_maps(self, seq: TokenSequence) -> AttentionStack:
        self._missing("attention_maps")

    def target_gradient(
        self,
        seq: TokenSequence,
        target: ScalarTarget,
        alpha: float = 1.0,
        baseline: str = "mask",
    ) -> EmbeddingGradient:
        """Gradient of the named scalar w.r.t. token embeddings at the
        interpolation point baseline + alpha * (input - baseline)."""
        self._missing("target_gradient")

    def target_value(
        self,
        seq: TokenSequence,
        target: ScalarTarget,
        alpha: float = 1.0,
        baseline: str = "mask",
    ) -> float:
        """Scalar named by `target` at the same interpolation point."""
        self._missing("target_value")

    def token_embeddings(self, seq: TokenSequence) -> np.ndarray:
        """Input token embeddings (n x d); gradient-capable backends only."""
        self._missing("token_embeddings")

    def baseline_embeddings(self, seq: TokenSequence, baseline: str = "mask") -> np.ndarray:
        self._missing("baseline_embeddings")

    # -- task output -----------------------------------------------------
    def predict(self, seq: TokenSequence) -> TaskOutput:
        self._missing("predict")

    # -- training --------------------------------------------------------
    def fine_tune(
        self,
        examples: Sequence[TrainExample],
        eta: float,
        cfg: TrainConfig,
    ) -> "ModelHandle":
        self._missing("fine_tune")

    # ---------------------------------------------------------------------
    def capabilities(self) -> dict[str, bool]:
        return {
            "has_attention": self.has_attention,
            "has_gradients": self.has_gradients,
            "is_encoder": self.is_encoder,
            "is_decoder": self.is_decoder,
            "supports_scoring": self.supports_scoring,
            "supports_embedding": self.supports_embedding,
            "supports_fine_tuning": self.supports_fine_tuning,
        }

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.backend_id!r} v{self.version}>"


_REGISTRY: dict[str, Callable[..., ModelHandle]] = {}


def register_backend(backend_id: str, factory: Callable[..., ModelHandle]) -> None:
    """Register a handle factory under a string id."""
    _REGISTRY[backend_id] = factory


def create_handle(backend_id: str, **config) -> ModelHandle:
    """Instantiate a backend by id.

    Exact ids take priority; ids of the form "external:<model>" route to the
    pretrained-model adapter with the remainder as the model name.
    """
    if backend_id in _REGISTRY:
        return _REGISTRY[backend_id](**config)
    if backend_id.startswith("external:"):
        factory = _REGISTRY.get("external")
        if factory is None:
            raise ConfigError("external adapter is not registered")
        return factory(model_name=backend_id.split(":", 1)[1], **config)
    known = ", ".join(sorted(_REGISTRY))
    raise ConfigError(f"unknown backend id {backend_id!r} (known: {known})")


def registered_backends() -> list[str]:
    return sorted(_REGISTRY)
