"""Synthetic keyword-sentiment task for desk-scale experiments.

Sentences are sampled from a seeded token chain, then a cue word followed
by a polarity word is planted at a random interior slot (twice in longer
sentences). The label is the polarity. The same chain serves as the
fluency scorer, with cue-to-polarity transitions boosted so that masking a
polarity word visibly hurts perplexity: sensitivity labeling has a real
signal to find, the way sentiment adjectives behave in natural text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SPECIAL_TOKENS, CorpusRecord, WhitespaceTokenizer
from .errors import ConfigError
from .oracle.toy import N_SPECIALS, RARE_ID, ToyBigramLM, ToyOneHotEmbedder
from .types import TokenSequence


@dataclass(frozen=True)
class SynthTask:
    """A generated corpus plus the handles and ids that define the task."""

    records: tuple[CorpusRecord, ...]
    tokenizer: WhitespaceTokenizer
    scorer: ToyBigramLM
    embedder: ToyOneHotEmbedder
    positive_ids: tuple[int, ...]
    negative_ids: tuple[int, ...]
    cue_ids: tuple[int, ...]
    filler_range: tuple[int, int]  # [lo, hi)

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def sentiment_ids(self) -> set[int]:
        return set(self.positive_ids) | set(self.negative_ids)


def make_keyword_task(
    n_examples: int = 2000,
    vocab_size: int = 150,
    n_cues: int = 6,
    n_polarity: int = 3,
    min_len: int = 8,
    max_len: int = 18,
    seed: int = 0,
    scorer_seed: int = 7,
    cue_boost: float = 150.0,
    smoothness: float = 2.0,
    slots_per_sentence: int = 1,
) -> SynthTask:
    """Build the corpus, tokenizer, and scorer for one seeded task instance."""
    if vocab_size < N_SPECIALS + n_cues + 2 * n_polarity + 10:
        raise ConfigError("vocab_size too small for the requested task")
    if n_examples < 2:
        raise ConfigError("need at least two examples")

    cue_ids = tuple(range(N_SPECIALS, N_SPECIALS + n_cues))
    pos_ids = tuple(range(N_SPECIALS + n_cues, N_SPECIALS + n_cues + n_polarity))
    neg_ids = tuple(
        range(N_SPECIALS + n_cues + n_polarity, N_SPECIALS + n_cues + 2 * n_polarity)
    )
    filler_lo = N_SPECIALS + n_cues + 2 * n_polarity
    filler_range = (filler_lo, vocab_size)

    # Cues predict polarity words strongly; polarity words re-enter fillers.
    boosts = [(c, s, cue_boost) for c in cue_ids for s in pos_ids + neg_ids]
    boosts += [(s, f, 4.0) for s in pos_ids + neg_ids for f in range(filler_lo, min(filler_lo + 20, vocab_size))]
    scorer = ToyBigramLM(
        vocab_size=vocab_size, seed=scorer_seed, boosts=boosts, rare_ids=(RARE_ID,),
        smoothness=smoothness,
    )
    embedder = ToyOneHotEmbedder(vocab_size)

    special = set(range(N_SPECIALS)) | set(cue_ids) | set(pos_ids) | set(neg_ids)
    rng = np.random.default_rng(seed)

    def filler_resample() -> int:
        return int(rng.integers(filler_range[0], filler_range[1]))

    records = []
    for idx in range(n_examples):
        n = int(rng.integers(min_len, max_len + 1))
        base = [int(t) for t in scorer.sample_sequence(rng, n).tokens]
        tokens = [t if t not in special else filler_resample() for t in base]
        label = int(rng.integers(0, 2))
        polarity_pool = pos_ids if label == 1 else neg_ids
        n_slots = min(slots_per_sentence, max(1, (n - 2) // 4))
        slots: list[int] = []
        for _ in range(n_slots):
            # cue at s, polarity word at s+1; keep slots disjoint
            for _attempt in range(20):
                s = int(rng.integers(1, n - 1))
                if all(abs(s - t) > 2 for t in slots):
                    slots.append(s)
                    break
        for s in slots:
            tokens[s] = int(rng.choice(cue_ids))
            tokens[s + 1] = int(rng.choice(polarity_pool))
        records.append((f"ex-{idx:05d}", tokens, label))

    vocab = list(SPECIAL_TOKENS) + [f"w{i}" for i in range(N_SPECIALS, vocab_size)]
    tokenizer = WhitespaceTokenizer(vocab)
    out = tuple(
        CorpusRecord(
            record_id=rid,
            text=" ".join(vocab[t] for t in tokens),
            tokens=TokenSequence.of(tokens),
            label=label,
            context="classification",
        )
        for rid, tokens, label in records
    )
    return SynthTask(
        records=out,
        tokenizer=tokenizer,
        scorer=scorer,
        embedder=embedder,
        positive_ids=pos_ids,
        negative_ids=neg_ids,
        cue_ids=cue_ids,
        filler_range=filler_range,
    )
