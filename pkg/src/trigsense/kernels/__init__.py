"""Hot numeric kernels with import-time backend selection.

The compiled Cython extension is preferred when present; the pure numpy
module is the fallback. TRIGSENSE_KERNELS=pure|compiled forces a choice
(benchmarks use this to compare the two).
"""

from __future__ import annotations

import importlib
import os

from ..errors import ConfigError

POOL_MEAN = 0
POOL_LAST = 1

_FORCED = os.environ.get("TRIGSENSE_KERNELS", "").strip().lower()


def _load(choice: str):
    if choice == "pure":
        return importlib.import_module("trigsense.kernels._pure"), "pure"
    if choice == "compiled":
        mod = importlib.import_module("trigsense.kernels._core")
        return mod, "compiled"
    # auto: compiled if built, else pure
    try:
        mod = importlib.import_module("trigsense.kernels._core")
        return mod, "compiled"
    except ImportError:
        return importlib.import_module("trigsense.kernels._pure"), "pure"


if _FORCED in ("", "auto"):
    _impl, BACKEND = _load("auto")
elif _FORCED in ("pure", "compiled"):
    try:
        _impl, BACKEND = _load(_FORCED)
    except ImportError as exc:
        raise ConfigError(
            f"TRIGSENSE_KERNELS={_FORCED} but that backend is unavailable: {exc}"
        ) from exc
else:
    raise ConfigError(
        f"TRIGSENSE_KERNELS must be 'pure', 'compiled', or 'auto', got {_FORCED!r}"
    )

bigram_logprob_sum = _impl.bigram_logprob_sum
attn_forward = _impl.attn_forward
attn_backward = _impl.attn_backward


def available_backends() -> list[str]:
    """Names of the kernel backends importable in this environment."""
    out = ["pure"]
    try:
        importlib.import_module("trigsense.kernels._core")
        out.insert(0, "compiled")
    except ImportError:
        pass
    return out


def load_backend(name: str):
    """Import a specific backend module (used by the benchmark)."""
    mod, _ = _load(name)
    return mod
