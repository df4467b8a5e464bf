"""Model-backend registry and built-in handles."""

from __future__ import annotations

from .base import ModelHandle, create_handle, register_backend, registered_backends
from .toy import (
    EOS_ID,
    MASK_ID,
    N_SPECIALS,
    RARE_ID,
    UNK_ID,
    ToyAttentionClassifier,
    ToyAttentionGenerator,
    ToyBigramLM,
    ToyOneHotEmbedder,
)

register_backend("toy:bigram", ToyBigramLM)
register_backend("toy:embedder", ToyOneHotEmbedder)
register_backend("toy:classifier", ToyAttentionClassifier.seeded)
register_backend("toy:generator", ToyAttentionGenerator.seeded)


def _external_factory(model_name: str, **config):
    from .external import make_external

    return make_external(model_name, **config)


register_backend("external", _external_factory)

__all__ = [
    "ModelHandle",
    "create_handle",
    "register_backend",
    "registered_backends",
    "ToyBigramLM",
    "ToyOneHotEmbedder",
    "ToyAttentionClassifier",
    "ToyAttentionGenerator",
    "MASK_ID",
    "UNK_ID",
    "EOS_ID",
    "RARE_ID",
    "N_SPECIALS",
]
