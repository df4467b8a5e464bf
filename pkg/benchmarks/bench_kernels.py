"""Benchmark the compiled kernel extension against the pure numpy fallback.

Times the three hot kernels (chain log-probability, attention forward,
attention backward with parameter gradients) at pipeline-typical sizes,
plus a composite fine-tuning epoch. Run:

    python benchmarks/bench_kernels.py [--repeats 2000]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from trigsense import kernels
from trigsense.oracle import ToyAttentionClassifier
from trigsense.types import TokenSequence, TrainConfig, TrainExample


def _timeit(fn, repeats: int) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1e6  # us per call


def kernel_cases(impl, rng, n=16, d=12, heads=2, n_out=2, vocab=150):
    H = rng.normal(size=(n, d))
    Wq = rng.normal(size=(heads, d, d)) / np.sqrt(d)
    Wk = rng.normal(size=(heads, d, d)) / np.sqrt(d)
    Wv = rng.normal(size=(heads, d, d)) / np.sqrt(d)
    Wo = rng.normal(size=(d, n_out)) / np.sqrt(d)
    b = rng.normal(size=n_out)
    dlogits = rng.normal(size=n_out)
    grads = [np.zeros_like(Wq), np.zeros_like(Wk), np.zeros_like(Wv), np.zeros_like(Wo), np.zeros_like(b)]
    tokens = rng.integers(0, vocab, size=n).astype(np.int64)
    trans = rng.random((vocab, vocab)) + 0.01
    trans /= trans.sum(axis=1, keepdims=True)
    init = np.full(vocab, 1.0 / vocab)
    log_trans, log_init = np.log(trans), np.log(init)
    return {
        f"bigram_logprob_sum (n={n}, V={vocab})": lambda: impl.bigram_logprob_sum(
            tokens, log_init, log_trans
        ),
        f"attn_forward (n={n}, d={d}, h={heads})": lambda: impl.attn_forward(
            H, Wq, Wk, Wv, Wo, b, 0
        ),
        f"attn_backward+params (n={n}, d={d}, h={heads})": lambda: impl.attn_backward(
            H, Wq, Wk, Wv, Wo, b, dlogits, 0, *grads
        ),
    }


def composite_case(backend_name: str) -> float:
    """One fine-tuning epoch over 256 examples through the selected backend."""
    import importlib
    import os

    os.environ["TRIGSENSE_KERNELS"] = backend_name
    import trigsense.kernels as km

    importlib.reload(km)
    import trigsense.oracle.toy as toy

    importlib.reload(toy)
    rng = np.random.default_rng(0)
    model = toy.ToyAttentionClassifier.seeded(vocab_size=150, n_classes=2, width=12, seed=1)
    examples = [
        TrainExample(TokenSequence.of(rng.integers(4, 150, size=14)), int(rng.integers(0, 2)))
        for _ in range(256)
    ]
    start = time.perf_counter()
    model.fine_tune(examples, 0.0, TrainConfig(epochs=1, learning_rate=0.05, seed=0))
    return time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=2000)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"available backends: {', '.join(backends)} (active: {kernels.BACKEND})\n")

    rows: dict[str, dict[str, float]] = {}
    for name in backends:
        impl = kernels.load_backend(name)
        rng = np.random.default_rng(42)
        for case, fn in kernel_cases(impl, rng).items():
            rows.setdefault(case, {})[name] = _timeit(fn, args.repeats)

    width = max(len(c) for c in rows) + 2
    header = f"{'kernel':<{width}}" + "".join(f"{b:>14}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for case, times in rows.items():
        line = f"{case:<{width}}" + "".join(f"{times[b]:>12.1f}us" for b in backends)
        if len(backends) > 1:
            line += f"{times['pure'] / times['compiled']:>9.1f}x"
        print(line)

    print("\ncomposite: one fine-tuning epoch, 256 examples, n=14, d=12")
    composite = {}
    for name in backends:
        composite[name] = composite_case(name)
        print(f"  {name:>9}: {composite[name]*1e3:.0f} ms")
    if len(backends) > 1:
        print(f"  speedup: {composite['pure'] / composite['compiled']:.1f}x")


if __name__ == "__main__":
    main()
