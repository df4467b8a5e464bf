"""Poisoned-corpus construction and combined-loss injection."""

import numpy as np
import pytest

from trigsense.errors import InvalidInputError
from trigsense.oracle import ToyAttentionClassifier
from trigsense.poisoning import (
    PoisonConfig,
    apply_triggers,
    inject,
    poison_corpus,
)
from trigsense.types import TokenSequence, TrainConfig, TrainExample


def _corpus(n=100, length=8, seed=0):
    rng = np.random.default_rng(seed)
    return [
        (f"ex-{i}", TokenSequence.of(rng.integers(4, 20, size=length)), int(rng.integers(0, 2)))
        for i in range(n)
    ]


TRIGGERS = [(2, 3)]


def _first_position(seq):
    return [1]


def test_poison_counts_exact():
    clean, poisoned = poison_corpus(
        _corpus(100), TRIGGERS, PoisonConfig(0.10, 1, seed=0), _first_position
    )
    assert len(poisoned) == 10
    assert len(clean) == 90


def test_poison_rate_zero_is_identity():
    corpus = _corpus(40)
    clean, poisoned = poison_corpus(corpus, TRIGGERS, PoisonConfig(0.0, 1, seed=0), _first_position)
    assert poisoned == []
    assert clean == corpus


def test_poison_small_rate_warns_and_poisons_one():
    with pytest.warns(UserWarning):
        clean, poisoned = poison_corpus(
            _corpus(5), TRIGGERS, PoisonConfig(0.05, 1, seed=0), _first_position
        )
    assert len(poisoned) == 1


def test_poison_seeded_determinism():
    corpus = _corpus(60)
    cfg = PoisonConfig(0.2, 1, seed=9)
    a = poison_corpus(corpus, TRIGGERS, cfg, _first_position)
    b = poison_corpus(corpus, TRIGGERS, cfg, _first_position)
    assert [p.original_id for p in a[1]] == [p.original_id for p in b[1]]
    assert [p.placements for p in a[1]] == [p.placements for p in b[1]]


def test_partition_is_exact():
    corpus = _corpus(50)
    clean, poisoned = poison_corpus(corpus, TRIGGERS, PoisonConfig(0.3, 1, seed=2), _first_position)
    clean_ids = {c[0] for c in clean}
    poison_ids = {p.original_id for p in poisoned}
    assert clean_ids | poison_ids == {c[0] for c in corpus}
    assert clean_ids & poison_ids == set()


def test_substitution_preserves_length_and_untouched_tokens():
    corpus = _corpus(30, length=10)
    clean, poisoned = poison_corpus(
        corpus, [(2, 3), (2, 3)], PoisonConfig(0.5, 1, seed=3), lambda s: [1, 6]
    )
    originals = dict((c[0], c[1]) for c in corpus)
    for p in poisoned:
        orig = originals[p.original_id]
        assert p.sequence.n == orig.n
        windows = {i for pos, toks in p.placements for i in range(pos, pos + len(toks))}
        for i in range(orig.n):
            if i in windows:
                continue
            assert p.sequence.tokens[i] == orig.tokens[i]
        assert p.target == 1
        assert p.flag == "poison"


def test_fixed_placement_replays_trigger_set_positions():
    import dataclasses

    from trigsense.triggers import RewardBreakdown, TriggerCandidate, TriggerSet, substitute

    base = TokenSequence.of(range(4, 14))
    pair = dataclasses.replace(
        TriggerCandidate(3, (2, 3), substitute(base, 3, (2, 3)), context_ppl=5.0),
        breakdown=RewardBreakdown(0.9, 0.1, 0.7),
    )
    ts = TriggerSet((pair,), trigger_len=2)
    corpus = _corpus(20, length=10)
    cfg = PoisonConfig(0.5, 1, placement="fixed", seed=1)
    _, poisoned = poison_corpus(corpus, ts, cfg)
    for p in poisoned:
        assert p.placements == ((3, (2, 3)),)


def test_apply_triggers_clips_when_nothing_fits():
    seq = TokenSequence.of([4, 5, 6])
    out, placed = apply_triggers(seq, [5], [(1, 2)])
    assert placed == ((1, (1, 2)),)
    assert out.n == seq.n


def test_poison_config_validation():
    with pytest.raises(InvalidInputError):
        PoisonConfig(1.5, 1)
    with pytest.raises(InvalidInputError):
        PoisonConfig(0.1, 1, eta=-1.0)
    with pytest.raises(InvalidInputError):
        PoisonConfig(0.1, 1, placement="scatter")


def test_inject_eta_zero_matches_clean_training_asr():
    """Zero poison weight leaves triggered-input behavior at the clean level,
    while a real injection raises it (paired seeded runs on the keyword task)."""
    from trigsense.datagen import make_keyword_task
    from trigsense.evaluation import asr

    task = make_keyword_task(n_examples=400, vocab_size=100, seed=3)
    records = list(task.records)
    train, test = records[:320], records[320:]
    entries = [(r.record_id, r.tokens, r.label) for r in train]
    trigger = [(task.filler_range[0] + 5, task.filler_range[0] + 6)]
    target_class = 1

    base = ToyAttentionClassifier.seeded(vocab_size=task.vocab_size, n_classes=2, width=10, seed=7)
    tc = TrainConfig(epochs=4, learning_rate=0.05, batch_size=64, seed=3)
    clean_model = base.fine_tune(
        [TrainExample(s, t, "clean") for _, s, t in entries], 0.0, tc
    )

    rng = np.random.default_rng(5)
    position_fn = lambda seq: [int(rng.integers(0, seq.n - 1))]
    clean_e, poisoned = poison_corpus(entries, trigger, PoisonConfig(0.05, target_class, seed=3), position_fn)

    triggered = []
    for r in test:
        if r.label == target_class:
            continue
        pos = min(2, r.tokens.n - 2)
        triggered.append(r.tokens.replaced(pos, trigger[0]))

    pre_asr = asr(clean_model, triggered, target_class)
    eta0_model, _ = inject(clean_model, clean_e, poisoned, eta=0.0, train_cfg=tc)
    eta1_model, _ = inject(clean_model, clean_e, poisoned, eta=1.0, train_cfg=tc)
    asr_eta0 = asr(eta0_model, triggered, target_class)
    asr_eta1 = asr(eta1_model, triggered, target_class)
    assert abs(asr_eta0 - pre_asr) <= 10.0  # within noise of the pre-injection model
    assert asr_eta1 > pre_asr


def test_inject_returns_new_handle_and_report():
    corpus = _corpus(40)
    clean, poisoned = poison_corpus(corpus, TRIGGERS, PoisonConfig(0.25, 1, seed=4), _first_position)
    target = ToyAttentionClassifier.seeded(vocab_size=20, n_classes=2, width=8, seed=2)
    tc = TrainConfig(epochs=3, learning_rate=0.05, seed=4)
    model, report = inject(target, clean, poisoned, eta=1.0, train_cfg=tc)
    assert model is not target
    assert report.n_clean == 30 and report.n_poison == 10
    assert len(report.epoch_losses) == 3
    assert report.loss_after <= report.loss_before
    with pytest.raises(InvalidInputError):
        inject(target, [], [], eta=1.0, train_cfg=tc)
