"""Poisoned-corpus construction and combined-loss backdoor injection.

Poisoning substitutes trigger tokens over length-L windows (sequence length
is preserved) and relabels the example to the adversarial target. Placement
either reruns the sensitivity pipeline per example (through a caller-
supplied position function) or reuses the trigger set's positions verbatim.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError
from .oracle.base import ModelHandle
from .triggers import TriggerSet
from .types import InjectionReport, TokenSequence, TrainConfig, TrainExample

PLACEMENT_PER_EXAMPLE = "per-example"
PLACEMENT_FIXED = "fixed"


@dataclass(frozen=True)
class PoisonConfig:
    """How much to poison, toward what target, and where triggers land."""

    poison_rate: float
    adversarial_target: int | TokenSequence
    eta: float = 1.0
    placement: str = PLACEMENT_PER_EXAMPLE
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise InvalidInputError("poison_rate must lie in [0, 1]")
        if self.eta < 0:
            raise InvalidInputError("eta must be >= 0")
        if self.placement not in (PLACEMENT_PER_EXAMPLE, PLACEMENT_FIXED):
            raise InvalidInputError(f"unknown placement policy {self.placement!r}")


@dataclass(frozen=True)
class PoisonedExample:
    """A relabeled example whose windows were substituted with triggers."""

    original_id: str
    sequence: TokenSequence
    placements: tuple[tuple[int, tuple[int, ...]], ...]
    target: int | TokenSequence
    flag: str = "poison"


CorpusEntry = tuple[str, TokenSequence, object]  # (id, tokens, label/target)
PositionFn = Callable[[TokenSequence], Sequence[int]]


def apply_triggers(
    seq: TokenSequence,
    positions: Sequence[int],
    token_groups: Sequence[tuple[int, ...]],
) -> tuple[TokenSequence, tuple[tuple[int, tuple[int, ...]], ...]]:
    """Substitute the k-th trigger token group at the k-th position.

    Positions that cannot host their group (window out of range) are
    skipped; at least one placement must land.
    """
    placed = []
    out = seq
    for pos, tokens in zip(positions, token_groups):
        if pos < 0 or pos + len(tokens) > seq.n:
            continue
        out = out.replaced(pos, tokens)
        placed.append((int(pos), tuple(tokens)))
    if not placed and token_groups:
        # clip the first group into range rather than dropping the example
        tokens = token_groups[0]
        if len(tokens) <= seq.n:
            pos = min(max(positions[0] if positions else 0, 0), seq.n - len(tokens))
            out = out.replaced(pos, tokens)
            placed.append((int(pos), tuple(tokens)))
    if not placed:
        raise InvalidInputError("no trigger placement fits this sequence")
    return out, tuple(placed)


def trigger_token_groups(trigger_source: TriggerSet | Sequence[tuple[int, ...]]) -> list[tuple[int, ...]]:
    if isinstance(trigger_source, TriggerSet):
        return [tuple(p.tokens) for p in trigger_source.pairs]
    return [tuple(g) for g in trigger_source]


def trigger_positions(trigger_source: TriggerSet | Sequence[tuple[int, ...]]) -> list[int]:
    if isinstance(trigger_source, TriggerSet):
        return [p.position for p in trigger_source.pairs]
    raise InvalidInputError("fixed placement needs a trigger set with positions")


def poison_corpus(
    corpus: Sequence[CorpusEntry],
    trigger_source: TriggerSet | Sequence[tuple[int, ...]],
    cfg: PoisonConfig,
    position_fn: PositionFn | None = None,
) -> tuple[list[CorpusEntry], list[PoisonedExample]]:
    """Split the corpus into an untouched subset and a poisoned subset.

    floor(rate * N) examples are drawn by seeded uniform choice (a positive
    rate always poisons at least one, with a warning). Under the per-example
    policy `position_fn` maps each sequence to preference-ordered placement
    positions; the fixed policy replays the trigger set's own positions.
    """
    if not corpus:
        raise InvalidInputError("corpus must be non-empty")
    n = len(corpus)
    count = int(np.floor(cfg.poison_rate * n))
    if cfg.poison_rate > 0 and count < 1:
        warnings.warn(
            f"poison_rate {cfg.poison_rate} selects under one of {n} examples; poisoning 1"
        )
        count = 1
    if count == 0:
        return list(corpus), []

    groups = trigger_token_groups(trigger_source)
    if not groups:
        raise InvalidInputError("trigger source carries no trigger tokens")
    if cfg.placement == PLACEMENT_PER_EXAMPLE and position_fn is None:
        raise InvalidInputError("per-example placement needs a position function")

    rng = np.random.default_rng(cfg.seed)
    chosen = set(int(i) for i in rng.choice(n, size=count, replace=False))

    clean: list[CorpusEntry] = []
    poisoned: list[PoisonedExample] = []
    for idx, (entry_id, seq, label) in enumerate(corpus):
        if idx not in chosen:
            clean.append((entry_id, seq, label))
            continue
        if cfg.placement == PLACEMENT_PER_EXAMPLE:
            positions = list(position_fn(seq))
        else:
            positions = trigger_positions(trigger_source)
        new_seq, placed = apply_triggers(seq, positions, groups)
        poisoned.append(
            PoisonedExample(
                original_id=entry_id,
                sequence=new_seq,
                placements=placed,
                target=cfg.adversarial_target,
            )
        )
    return clean, poisoned


def inject(
    target: ModelHandle,
    clean: Sequence[CorpusEntry],
    poisoned: Sequence[PoisonedExample],
    eta: float,
    train_cfg: TrainConfig,
) -> tuple[ModelHandle, InjectionReport]:
    """Fine-tune on the combined corpus with per-class loss weights.

    Returns the new backdoored handle plus its training report; the input
    handle is untouched.
    """
    examples = [TrainExample(seq, label, "clean") for (_, seq, label) in clean]
    examples += [TrainExample(p.sequence, p.target, "poison") for p in poisoned]
    if not examples:
        raise InvalidInputError("nothing to train on")
    new_handle = target.fine_tune(examples, eta, train_cfg)
    report = getattr(new_handle, "last_training", None) or InjectionReport(
        n_clean=len(clean), n_poison=len(poisoned), eta=eta, seed=train_cfg.seed
    )
    return new_handle, report
