"""Context-aware trigger construction: threshold, spacing, candidate
sampling, fluency filtering, soft-reward ranking, and final selection.

Candidates come from the model itself: encoder backends fill a masked
window slot-by-slot, decoder backends extend the left context token by
token. A reward trades attack effectiveness on a surrogate backdoored
model against the fluency cost of the substituted sentence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import CapabilityMissingError, ConfigError, InternalError, InvalidInputError
from .oracle.base import ModelHandle
from .attribution import RefinedSensitivityMap
from .types import TokenSequence

DEFAULT_LAMBDA = 0.7
DEFAULT_TAU_INSERT_FRAC = 0.75
DEFAULT_PPL_FACTOR = 1.5
DEFAULT_NUM_SAMPLES = 20
DEFAULT_TRIGGER_LEN = 2
DEFAULT_K_TRIGGERS = {"classification": 3, "generation": 4}


@dataclass(frozen=True)
class RewardBreakdown:
    """Reward = lam * attack_score - (1 - lam) * ppl_norm."""

    attack_score: float
    ppl_norm: float
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError("lambda must lie in [0, 1]")
        if not 0.0 <= self.attack_score <= 1.0:
            raise InvalidInputError("attack score must lie in [0, 1]")
        if self.ppl_norm < 0.0:
            raise InvalidInputError("normalized perplexity must be >= 0")

    @property
    def reward(self) -> float:
        return self.lam * self.attack_score - (1.0 - self.lam) * self.ppl_norm


@dataclass(frozen=True)
class TriggerCandidate:
    """A length-L substitution at one position, with its scored context."""

    position: int
    tokens: tuple[int, ...]
    substituted: TokenSequence
    context_ppl: float | None = None
    breakdown: RewardBreakdown | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise InvalidInputError("trigger must contain at least one token")
        if self.position < 0 or self.position + len(self.tokens) > self.substituted.n:
            raise InvalidInputError("substitution window outside the sequence")

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def reward(self) -> float:
        if self.breakdown is None:
            raise InvalidInputError("candidate has not been scored")
        return self.breakdown.reward


@dataclass(frozen=True)
class TriggerSet:
    """Final (position, tokens) pairs sorted by reward descending."""

    pairs: tuple[TriggerCandidate, ...]
    trigger_len: int

    def __post_init__(self):
        rewards = [p.reward for p in self.pairs]
        if any(a < b for a, b in zip(rewards, rewards[1:])):
            raise InvalidInputError("trigger set must be sorted by reward descending")
        positions = sorted(p.position for p in self.pairs)
        for a, b in zip(positions, positions[1:]):
            if b - a < self.trigger_len:
                raise InvalidInputError("trigger positions closer than the trigger length")

    @property
    def k(self) -> int:
        return len(self.pairs)


def substitute(seq: TokenSequence, position: int, tokens: Sequence[int]) -> TokenSequence:
    """Replace len(tokens) consecutive tokens at `position` (length-preserving)."""
    return seq.replaced(position, tokens)


def refined_positions(refined: RefinedSensitivityMap, tau_insert: float | None = None) -> list[int]:
    """Positions whose refined score reaches the insertion threshold.

    The default threshold is 0.75 of the maximum refined score.
    """
    scores = refined.scores
    if tau_insert is None:
        tau_insert = DEFAULT_TAU_INSERT_FRAC * float(scores.max())
    return [i for i in range(refined.n) if scores[i] >= tau_insert]


def greedy_nonoverlap(
    positions: Sequence[int], scores: Mapping[int, float] | np.ndarray, trigger_len: int
) -> list[int]:
    """Greedy high-score-first selection keeping positions >= L apart.

    Score ties break toward the lower index; the result is ascending.
    """
    if trigger_len < 1:
        raise InvalidInputError("trigger length must be >= 1")
    if isinstance(scores, np.ndarray):
        score_of = lambda i: float(scores[i])
    else:
        score_of = lambda i: float(scores[i])
    ranked = sorted(positions, key=lambda i: (-score_of(i), i))
    accepted: list[int] = []
    for pos in ranked:
        if all(abs(pos - a) >= trigger_len for a in accepted):
            accepted.append(pos)
    return sorted(accepted)


def generate_candidates(
    target: ModelHandle,
    seq: TokenSequence,
    position: int,
    trigger_len: int = DEFAULT_TRIGGER_LEN,
    num_samples: int = DEFAULT_NUM_SAMPLES,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    scorer: ModelHandle | None = None,
    mode: str | None = None,
) -> list[TriggerCandidate]:
    """Sample deduplicated trigger candidates for one window.

    Encoder-capable backends fill each masked slot independently from the
    masked input; decoder backends extend the left context sequentially,
    feeding back already-emitted trigger tokens. Backends capable of both
    default to the encoder route; `mode` ("encoder"/"decoder") overrides.
    Each candidate carries the perplexity of the substituted sentence under
    `scorer` (default: the target itself when it can score).
    """
    if num_samples < 1:
        raise InvalidInputError("num_samples must be >= 1")
    if position < 0 or position + trigger_len > seq.n:
        raise InvalidInputError("substitution window outside the sequence")
    rng = rng or np.random.default_rng(0)
    scorer = scorer if scorer is not None else (target if target.supports_scoring else None)
    if mode is None:
        mode = "encoder" if target.is_encoder else "decoder"
    if mode == "encoder" and not target.is_encoder:
        raise CapabilityMissingError(f"{target.backend_id} cannot fill masked slots")
    if mode == "decoder" and not target.is_decoder:
        raise CapabilityMissingError(f"{target.backend_id} cannot extend a prefix")

    draws: list[tuple[int, ...]] = []
    if mode == "encoder":
        if target.mask_id is None:
            raise CapabilityMissingError(f"{target.backend_id} defines no mask token")
        masked = seq
        for off in range(trigger_len):
            masked = masked.masked(position + off, target.mask_id)
        dists = [
            target.masked_fill_distribution(masked, position + off) for off in range(trigger_len)
        ]
        for _ in range(num_samples):
            draws.append(tuple(d.sample(rng, temperature) for d in dists))
    else:
        if position == 0:
            raise InvalidInputError("decoder sampling needs a non-empty left context")
        for _ in range(num_samples):
            prefix = TokenSequence.of(seq.tokens[:position])
            emitted = []
            for _off in range(trigger_len):
                dist = target.next_token_distribution(prefix)
                tok = dist.sample(rng, temperature)
                emitted.append(tok)
                prefix = prefix.append(tok)
            draws.append(tuple(emitted))

    seen: set[tuple[int, ...]] = set()
    out: list[TriggerCandidate] = []
    for tokens in draws:
        if tokens in seen:
            continue
        seen.add(tokens)
        substituted = substitute(seq, position, tokens)
        ppl = scorer.perplexity(substituted) if scorer is not None else None
        out.append(
            TriggerCandidate(
                position=position, tokens=tokens, substituted=substituted, context_ppl=ppl
            )
        )
    return out


def filter_by_ppl(candidates: Sequence[TriggerCandidate], tau_ppl: float) -> list[TriggerCandidate]:
    """Keep candidates at or under the fluency threshold.

    If every candidate is above the threshold the single lowest-perplexity
    one survives, so downstream selection always has something to rank.
    """
    if not candidates:
        return []
    for cand in candidates:
        if cand.context_ppl is None:
            raise InvalidInputError("candidates must carry a context perplexity")
    kept = [c for c in candidates if c.context_ppl <= tau_ppl]
    if kept:
        return kept
    best = min(range(len(candidates)), key=lambda i: (candidates[i].context_ppl, i))
    return [candidates[best]]


def ppl_threshold(clean_ppls: Sequence[float], factor: float = DEFAULT_PPL_FACTOR) -> float:
    """Fluency threshold: factor times the mean clean-corpus perplexity."""
    if not clean_ppls:
        raise ConfigError("cannot derive a perplexity threshold from no clean scores")
    return factor * float(np.mean(clean_ppls))


def attack_score(
    surrogate: ModelHandle, substituted: TokenSequence, adversarial_target: int | TokenSequence
) -> float:
    """Probability-scaled attack effectiveness in [0, 1].

    Classification: softmax probability of the target class. Generation:
    exp(mean per-token log-likelihood of the target sequence).
    """
    if surrogate.task == "classification":
        if not isinstance(adversarial_target, int):
            raise InvalidInputError("classification targets are class ids")
        out = surrogate.predict(substituted)
        logits = out.logits
        if not 0 <= adversarial_target < len(logits):
            raise InvalidInputError(f"target class {adversarial_target} out of range")
        shifted = logits - logits.max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        return float(probs[adversarial_target])
    if surrogate.task == "generation":
        if not isinstance(adversarial_target, TokenSequence):
            raise InvalidInputError("generation targets are token sequences")
        return float(np.exp(surrogate.continuation_loglik(substituted, adversarial_target)))
    raise CapabilityMissingError(f"{surrogate.backend_id} has no task head to attack")


def reward(
    candidate: TriggerCandidate,
    surrogate: ModelHandle,
    adversarial_target: int | TokenSequence,
    lam: float = DEFAULT_LAMBDA,
    clean_ppl_baseline: float = 1.0,
) -> TriggerCandidate:
    """Score one candidate; returns a copy carrying its RewardBreakdown.

    The candidate's context perplexity is divided by the clean-corpus
    baseline so both reward terms live on comparable scales.
    """
    if clean_ppl_baseline <= 0:
        raise ConfigError("clean perplexity baseline must be positive")
    if candidate.context_ppl is None:
        raise InvalidInputError("candidate must carry a context perplexity")
    score = attack_score(surrogate, candidate.substituted, adversarial_target)
    breakdown = RewardBreakdown(
        attack_score=score, ppl_norm=candidate.context_ppl / clean_ppl_baseline, lam=lam
    )
    return replace(candidate, breakdown=breakdown)


def select_optimal(
    per_position: Mapping[int, Sequence[TriggerCandidate]],
) -> list[TriggerCandidate]:
    """Best candidate per position by reward; ties break toward lower
    perplexity, then lexicographic tokens. Returns positions ascending."""
    out = []
    for position in sorted(per_position):
        cands = per_position[position]
        if not cands:
            raise InternalError(f"position {position} has no scored candidates")
        best = min(cands, key=lambda c: (-c.reward, c.context_ppl, c.tokens))
        out.append(best)
    return out


def select_top_k(
    pairs: Sequence[TriggerCandidate], k_triggers: int, trigger_len: int | None = None
) -> TriggerSet:
    """Keep the k highest-reward pairs, reward-descending.

    Fewer pairs than requested returns them all with a warning.
    """
    if not pairs:
        raise InvalidInputError("no position-trigger pairs to select from")
    if k_triggers < 1:
        raise InvalidInputError("k_triggers must be >= 1")
    if len(pairs) < k_triggers:
        warnings.warn(
            f"only {len(pairs)} position-trigger pairs available; requested {k_triggers}"
        )
    ranked = sorted(pairs, key=lambda c: (-c.reward, c.context_ppl, c.position))
    chosen = ranked[:k_triggers]
    length = trigger_len if trigger_len is not None else max(c.length for c in chosen)
    return TriggerSet(tuple(chosen), trigger_len=length)
