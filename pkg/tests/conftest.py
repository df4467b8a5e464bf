import sys
from pathlib import Path

import numpy as np
import pytest

# Allow running the suite from a source checkout without installation
# (the compiled kernel extension then simply falls back to pure numpy).
_SRC = Path(__file__).resolve().parent.parent / "src"
try:
    import trigsense  # noqa: F401
except ImportError:  # pragma: no cover
    sys.path.insert(0, str(_SRC))

from trigsense.oracle import ToyAttentionClassifier, ToyBigramLM, ToyOneHotEmbedder


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def bigram():
    return ToyBigramLM(vocab_size=30, seed=7)


@pytest.fixture
def embedder():
    return ToyOneHotEmbedder(30)


@pytest.fixture
def classifier():
    return ToyAttentionClassifier.seeded(vocab_size=30, n_classes=2, width=8, heads=1, seed=1)
