"""Attack metrics, perturbation-based ground truth, and the
perplexity-outlier defense check.

Three headline numbers: attack success rate over triggered inputs, a
stealthiness composite of perplexity ratio and embedding similarity, and
the Spearman correlation between predicted and measured token-sensitivity
rankings. The defense check flags tokens whose removal sharply drops
sentence perplexity and reports how often triggers slip through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, UndefinedResultError
from .oracle.base import ModelHandle
from .types import TaskOutput, TokenSequence, cosine_similarity


# ---------------------------------------------------------------------------
# Attack success rate
# ---------------------------------------------------------------------------


def target_match_predicate(adversarial_target: int | TokenSequence) -> Callable[[TaskOutput], bool]:
    """Success test: target-class match, or target subsequence in the output."""

    def check(out: TaskOutput) -> bool:
        if isinstance(adversarial_target, int):
            return out.is_classification and out.predicted_class() == adversarial_target
        if out.is_classification:
            return False
        want = adversarial_target.tokens
        got = out.sequence.tokens
        return any(got[i : i + len(want)] == want for i in range(len(got) - len(want) + 1))

    return check


def asr(
    model: ModelHandle,
    triggered_inputs: Sequence[TokenSequence],
    success: Callable[[TaskOutput], bool] | int | TokenSequence,
) -> float:
    """Percentage of triggered inputs whose output satisfies the predicate."""
    if not triggered_inputs:
        raise InvalidInputError("attack success rate needs at least one triggered input")
    predicate = success if callable(success) else target_match_predicate(success)
    hits = sum(1 for seq in triggered_inputs if predicate(model.predict(seq)))
    return 100.0 * hits / len(triggered_inputs)


# ---------------------------------------------------------------------------
# Attack stealthiness
# ---------------------------------------------------------------------------


def attack_stealthiness(
    scorer: ModelHandle, embedder: ModelHandle, original: TokenSequence, modified: TokenSequence
) -> float:
    """0.5 * clip0(1 - PPL ratio) + 0.5 * embedding cosine, clamped to [0, 1].

    Identity inputs score exactly 0.5: the perplexity term vanishes and the
    similarity term is exactly 1.
    """
    ratio = scorer.perplexity(modified) / scorer.perplexity(original)
    ppl_term = max(0.0, 1.0 - ratio)
    sim = cosine_similarity(
        embedder.sentence_embedding(original), embedder.sentence_embedding(modified)
    )
    return float(min(1.0, max(0.0, 0.5 * ppl_term + 0.5 * sim)))


# ---------------------------------------------------------------------------
# Rank correlation
# ---------------------------------------------------------------------------


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.shape[0], dtype=np.float64)
    i = 0
    sorted_vals = arr[order]
    while i < arr.shape[0]:
        j = i
        while j + 1 < arr.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def src(pred_scores: Sequence[float], true_scores: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Identical rank vectors short-circuit to exactly 1.0 (and exact reversals
    to -1.0), so the identity and monotone-invariance properties hold
    without floating-point slack.
    """
    a = np.asarray(pred_scores, dtype=np.float64)
    b = np.asarray(true_scores, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("score vectors must share one length")
    if a.shape[0] < 2:
        raise UndefinedResultError("rank correlation needs at least two positions")
    ra, rb = average_ranks(a), average_ranks(b)
    va = ra - ra.mean()
    vb = rb - rb.mean()
    denom_a = float(np.sqrt((va * va).sum()))
    denom_b = float(np.sqrt((vb * vb).sum()))
    if denom_a == 0.0 or denom_b == 0.0:
        raise UndefinedResultError("rank correlation undefined for constant scores")
    if np.array_equal(ra, rb):
        return 1.0
    n = a.shape[0]
    if np.array_equal(ra, n + 1 - rb):
        return -1.0
    return float(np.clip((va * vb).sum() / (denom_a * denom_b), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Perturbation ground truth
# ---------------------------------------------------------------------------


def _symmetric_kl(p: np.ndarray, q: np.ndarray) -> float:
    p = np.maximum(p, 1e-12)
    q = np.maximum(q, 1e-12)
    return float(((p - q) * (np.log(p) - np.log(q))).sum())


def perturbation_deltas(
    model: ModelHandle, seq: TokenSequence, neutral_token: int, target_class: int | None = None
) -> np.ndarray:
    """Output change from replacing each token with the neutral token.

    Classification: |change in target-class probability| (default target:
    the model's own prediction on the clean input). Generation: symmetric
    KL between next-token distributions at the first point where the two
    greedy decodes diverge (step 0 if they never do).
    """
    if seq.n < 2:
        raise InvalidInputError("perturbation ranking needs n >= 2")
    deltas = np.zeros(seq.n)
    if model.task == "classification":
        base = model.predict(seq).logits
        base_probs = np.exp(base - base.max())
        base_probs /= base_probs.sum()
        cls = int(np.argmax(base)) if target_class is None else int(target_class)
        for i in range(seq.n):
            out = model.predict(seq.replaced(i, [neutral_token])).logits
            probs = np.exp(out - out.max())
            probs /= probs.sum()
            deltas[i] = abs(float(probs[cls] - base_probs[cls]))
        return deltas
    if model.task == "generation":
        base_out = model.predict(seq).sequence.tokens
        for i in range(seq.n):
            perturbed = seq.replaced(i, [neutral_token])
            pert_out = model.predict(perturbed).sequence.tokens
            step = 0
            for t, (x, y) in enumerate(zip(base_out, pert_out)):
                if x != y:
                    step = t
                    break
            base_prefix = TokenSequence.of(seq.tokens + base_out[:step])
            pert_prefix = TokenSequence.of(perturbed.tokens + pert_out[:step])
            p = model.next_token_distribution(base_prefix).probs
            q = model.next_token_distribution(pert_prefix).probs
            deltas[i] = _symmetric_kl(p, q)
        return deltas
    raise InvalidInputError(f"{model.backend_id} has no task head to perturb")


def perturbation_ground_truth(
    model: ModelHandle, seq: TokenSequence, neutral_token: int, target_class: int | None = None
) -> list[int]:
    """Positions ranked by perturbation impact, descending (ties: index order)."""
    deltas = perturbation_deltas(model, seq, neutral_token, target_class)
    return sorted(range(seq.n), key=lambda i: (-deltas[i], i))


# ---------------------------------------------------------------------------
# Perplexity-outlier defense
# ---------------------------------------------------------------------------


def removal_drops(scorer: ModelHandle, seq: TokenSequence) -> np.ndarray:
    """Suspicion scores: perplexity drop when each token is removed."""
    if seq.n < 2:
        raise InvalidInputError("outlier filtering needs n >= 2")
    base = scorer.perplexity(seq)
    return np.array([base - scorer.perplexity(seq.without(i)) for i in range(seq.n)])


def onion_filter(
    scorer: ModelHandle, seq: TokenSequence, threshold: float | None = None
) -> list[int]:
    """Flag positions whose removal drops perplexity by more than `threshold`.

    The default threshold is one standard deviation of this sentence's own
    per-position drops.
    """
    drops = removal_drops(scorer, seq)
    if threshold is None:
        threshold = float(drops.std())
    return [i for i in range(seq.n) if drops[i] > threshold]


@dataclass
class DefenseReport:
    """Flagged positions per example plus the trigger evasion rate."""

    flagged: list[list[int]] = field(default_factory=list)
    trigger_positions: list[list[int]] = field(default_factory=list)
    evasion_rate: float = 0.0

    def to_dict(self) -> dict:
        return {
            "flagged": [list(f) for f in self.flagged],
            "trigger_positions": [list(t) for t in self.trigger_positions],
            "evasion_rate": self.evasion_rate,
        }


def defense_report(
    scorer: ModelHandle,
    triggered: Sequence[tuple[TokenSequence, Sequence[int]]],
    threshold: float | None = None,
) -> DefenseReport:
    """Run the outlier filter over triggered examples.

    `triggered` pairs each sequence with the token positions its triggers
    occupy; the evasion rate is the fraction of examples where none of
    those positions were flagged.
    """
    if not triggered:
        raise InvalidInputError("defense report needs at least one triggered example")
    report = DefenseReport()
    evaded = 0
    for seq, trig_positions in triggered:
        flagged = onion_filter(scorer, seq, threshold)
        report.flagged.append(flagged)
        report.trigger_positions.append(sorted(int(p) for p in trig_positions))
        if not set(flagged) & set(trig_positions):
            evaded += 1
    report.evasion_rate = evaded / len(triggered)
    return report


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Bundle of headline metrics for one evaluation run."""

    asr_percent: float | None = None
    as_values: list[float] = field(default_factory=list)
    src_values: list[float] = field(default_factory=list)
    n_triggered: int = 0
    n_clean: int = 0
    clean_accuracy: float | None = None
    baseline_accuracy: float | None = None
    evasion_rate: float | None = None
    config_hash: str = ""
    seed: int = 0

    @property
    def as_mean(self) -> float | None:
        return float(np.mean(self.as_values)) if self.as_values else None

    @property
    def src_mean(self) -> float | None:
        return float(np.mean(self.src_values)) if self.src_values else None

    def to_dict(self) -> dict:
        return {
            "asr_percent": self.asr_percent,
            "as_mean": self.as_mean,
            "as_values": list(self.as_values),
            "src_mean": self.src_mean,
            "src_values": list(self.src_values),
            "n_triggered": self.n_triggered,
            "n_clean": self.n_clean,
            "clean_accuracy": self.clean_accuracy,
            "baseline_accuracy": self.baseline_accuracy,
            "evasion_rate": self.evasion_rate,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def clean_accuracy(model: ModelHandle, examples: Sequence[tuple[TokenSequence, int]]) -> float:
    """Fraction of clean classification examples predicted correctly."""
    if not examples:
        raise InvalidInputError("accuracy needs at least one example")
    hits = sum(1 for seq, label in examples if model.predict(seq).predicted_class() == label)
    return hits / len(examples)
