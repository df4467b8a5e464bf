"""Peak detection, segmentation, attribution approximators, and assembly."""

import numpy as np
import pytest

from trigsense.attribution import (
    DISPERSION_THRESHOLD,
    IG_BAND,
    ROLLOUT_BAND,
    RefinedSensitivityMap,
    Segment,
    SegmentPartition,
    adaptive_k,
    default_readout,
    detect_peaks,
    gradient_magnitude_proxy,
    ig_attribution,
    refine,
    refine_sequence,
    rollout_attribution,
    score_segments,
    segment,
    segment_budget,
    top_k_segments,
)
from trigsense.errors import CapabilityMissingError, InternalError, InvalidInputError
from trigsense.oracle import ToyAttentionClassifier, ToyAttentionGenerator, ToyBigramLM
from trigsense.oracle.stubs import FixedAttention, LinearScorer
from trigsense.sensitivity import SensitivityMap
from trigsense.types import ScalarTarget, TokenSequence


# ---------------------------------------------------------------------------
# peaks
# ---------------------------------------------------------------------------


def test_detect_peaks_arithmetic():
    # mu 0.2, sigma 0.4 -> threshold 0.6 -> only the spike
    assert detect_peaks(SensitivityMap(np.array([0.0, 0.0, 1.0, 0.0, 0.0]))) == [2]


def test_detect_peaks_degenerate():
    assert detect_peaks(SensitivityMap(np.full(5, 0.5))) == []
    assert detect_peaks(SensitivityMap(np.array([0.7]))) == []


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def _seq(n):
    return TokenSequence.of(range(4, 4 + n))


def test_dispersion_rule_fine_vs_coarse():
    s = np.zeros(40)
    s[[4, 5, 6]] = 1.0  # std(4,5,6)/40 ~ 0.02 < 0.15
    part = segment(_seq(40), SensitivityMap(s))
    assert part.granularity == "fine"
    assert max(g.length for g in part.segments) <= 5

    s2 = np.zeros(40)
    s2[[2, 20, 38]] = 1.0  # std/40 ~ 0.37
    assert segment(_seq(40), SensitivityMap(s2)).granularity == "coarse"


def test_no_peaks_is_coarse():
    part = segment(_seq(45), SensitivityMap(np.full(45, 0.3)))
    assert part.granularity == "coarse"
    assert max(g.length for g in part.segments) <= 20


def test_sentence_boundaries_drive_coarse_partition():
    s = SensitivityMap(np.full(9, 0.3))
    part = segment(_seq(9), s, boundaries=[4, 7])
    assert [(g.start, g.end) for g in part.segments] == [(0, 4), (4, 7), (7, 9)]


def test_partition_always_covers():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 60))
        scores = rng.random(n)
        part = segment(_seq(n), SensitivityMap(scores))
        assert part.segments[0].start == 0
        assert part.segments[-1].end == n
        cursor = 0
        for g in part.segments:
            assert g.start == cursor
            cursor = g.end


def test_partition_validation():
    with pytest.raises(InvalidInputError):
        SegmentPartition((Segment(0, 2), Segment(3, 4)), "coarse")  # gap
    with pytest.raises(InvalidInputError):
        SegmentPartition((Segment(0, 2), Segment(1, 4)), "coarse")  # overlap
    with pytest.raises(InvalidInputError):
        Segment(3, 3)


# ---------------------------------------------------------------------------
# segment scoring
# ---------------------------------------------------------------------------


def test_uniform_scorer_gives_equal_zetas():
    scorer = ToyBigramLM.uniform(30)
    seq = _seq(10)
    part = score_segments(scorer, seq, segment(seq, SensitivityMap(np.full(10, 0.2))))
    for g in part.segments:
        assert g.zeta == pytest.approx(30.0, rel=1e-9)


def test_single_segment_zeta_is_whole_sequence_ppl(bigram):
    seq = TokenSequence.of([4, 5, 6, 7])
    part = SegmentPartition((Segment(0, 4),), "coarse")
    scored = score_segments(bigram, seq, part)
    assert scored.segments[0].zeta == pytest.approx(bigram.perplexity(seq), rel=1e-12)


def test_two_segment_split_matches_span_ppls(bigram):
    seq = TokenSequence.of([4, 5, 6, 7, 8, 9])
    part = SegmentPartition((Segment(0, 3), Segment(3, 6)), "coarse")
    scored = score_segments(bigram, seq, part)
    assert scored.segments[0].zeta == pytest.approx(
        bigram.perplexity(TokenSequence.of([4, 5, 6])), rel=1e-12
    )
    assert scored.segments[1].zeta == pytest.approx(
        bigram.perplexity(TokenSequence.of([7, 8, 9])), rel=1e-12
    )


# ---------------------------------------------------------------------------
# adaptive K
# ---------------------------------------------------------------------------


def test_segment_budget_worked_examples():
    assert segment_budget(peak_count=2, m=2, beta=0.5) == 1  # floor(0.5)=0 -> max(1, 0)
    assert segment_budget(peak_count=0, m=4, beta=0.5) == 1
    assert segment_budget(peak_count=6, m=3, beta=0.5) == 3  # floor(1)*3 = 3, clamp 3
    assert segment_budget(peak_count=16, m=4, beta=0.5) == 4  # raw 8 clamps to m


def test_adaptive_k_bounds():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        scores = rng.random(n)
        sens = SensitivityMap(scores)
        part = segment(_seq(n), sens)
        k = adaptive_k(sens, part, beta=0.5)
        assert 1 <= k <= part.m


def test_top_k_segment_ranking_keys(bigram):
    seq = TokenSequence.of([4, 5, 6, 7, 8, 9])
    sens = SensitivityMap(np.array([0.1, 0.1, 0.1, 0.9, 0.9, 0.9]))
    part = SegmentPartition((Segment(0, 3, zeta=5.0), Segment(3, 6, zeta=50.0)), "coarse")
    assert top_k_segments(part, 1, "zeta") == [1]
    assert top_k_segments(part, 1, "sensitivity", sens) == [1]
    flipped = SensitivityMap(np.array([0.9, 0.9, 0.9, 0.1, 0.1, 0.1]))
    assert top_k_segments(part, 1, "sensitivity", flipped) == [0]
    with pytest.raises(InvalidInputError):
        top_k_segments(part, 3, "zeta")


# ---------------------------------------------------------------------------
# integrated gradients
# ---------------------------------------------------------------------------


def test_ig_linear_closed_form(rng):
    emb = rng.normal(size=(10, 4))
    weights = rng.normal(size=(8, 4))
    lin = LinearScorer(emb, weights)
    seq = TokenSequence.of([4, 5, 6])
    expected = (emb[[4, 5, 6]] * weights[:3]).sum(axis=1)
    for steps in (1, 3, 64):
        phi = ig_attribution(lin, seq, ScalarTarget.class_logit(0), steps=steps, baseline="zeros")
        np.testing.assert_allclose(phi, expected, atol=1e-12)


def test_ig_completeness_on_attention_toy(classifier):
    seq = TokenSequence.of([4, 5, 6, 7, 8])
    target = ScalarTarget.class_logit(1)
    phi = ig_attribution(classifier, seq, target, steps=256, baseline="mask")
    gap = classifier.target_value(seq, target, 1.0) - classifier.target_value(seq, target, 0.0)
    assert abs(phi.sum() - gap) <= 1e-3


def test_ig_convergence_sweep(classifier):
    """Midpoint-rule error vs a dense reference shrinks as steps grow."""
    seq = TokenSequence.of([4, 5, 6, 7, 8])
    target = ScalarTarget.class_logit(0)
    reference = ig_attribution(classifier, seq, target, steps=1024)
    errors = [
        np.abs(ig_attribution(classifier, seq, target, steps=s) - reference).max()
        for s in (1, 4, 16, 64, 256)
    ]
    assert errors[0] > errors[-1]
    for a, b in zip(errors, errors[1:]):
        assert b <= a + 1e-12


def test_ig_requires_gradients_and_steps(bigram, classifier):
    seq = TokenSequence.of([4, 5])
    with pytest.raises(CapabilityMissingError):
        ig_attribution(bigram, seq, ScalarTarget.class_logit(0))
    with pytest.raises(InvalidInputError):
        ig_attribution(classifier, seq, ScalarTarget.class_logit(0), steps=0)


def test_ig_positions_restriction(classifier):
    seq = TokenSequence.of([4, 5, 6, 7])
    target = ScalarTarget.class_logit(1)
    full = ig_attribution(classifier, seq, target, steps=16)
    partial = ig_attribution(classifier, seq, target, steps=16, positions=[1, 3])
    np.testing.assert_allclose(partial[[1, 3]], full[[1, 3]], atol=1e-12)
    assert partial[0] == 0.0 and partial[2] == 0.0


# ---------------------------------------------------------------------------
# attention rollout
# ---------------------------------------------------------------------------


def test_rollout_identity_attention_concentrates_on_readout():
    handle = FixedAttention("identity")
    seq = TokenSequence.of([4, 5, 6])
    np.testing.assert_allclose(rollout_attribution(handle, seq, "first"), [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(rollout_attribution(handle, seq, "last"), [0.0, 0.0, 1.0], atol=1e-12)


def test_rollout_uniform_attention_rows():
    handle = FixedAttention("uniform")
    seq = TokenSequence.of([4, 5, 6])
    # one layer of (A + I)/2 with uniform A: readout row = (2/3, 1/6, 1/6)
    np.testing.assert_allclose(
        rollout_attribution(handle, seq, "first"), [2 / 3, 1 / 6, 1 / 6], atol=1e-12
    )
    # the uniform distribution is the fixed point under the mean readout
    np.testing.assert_allclose(rollout_attribution(handle, seq, "mean"), np.full(3, 1 / 3), atol=1e-12)


def test_rollout_single_token():
    handle = FixedAttention("identity")
    np.testing.assert_array_equal(rollout_attribution(handle, TokenSequence.of([4]), "first"), [1.0])


def test_rollout_multi_layer_is_product():
    maps = np.tile(np.eye(4), (3, 2, 1, 1))
    handle = FixedAttention(maps=maps)
    out = rollout_attribution(handle, TokenSequence.of([4, 5, 6, 7]), "first")
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_rollout_capability_fallback(bigram):
    seq = TokenSequence.of([4, 5, 6])
    with pytest.raises(CapabilityMissingError):
        rollout_attribution(bigram, seq)
    lin = LinearScorer(np.eye(8), np.ones((4, 8)))
    proxy = gradient_magnitude_proxy(lin, TokenSequence.of([1, 2, 3]), ScalarTarget.class_logit(0))
    assert proxy.shape == (3,)
    assert proxy.sum() == pytest.approx(1.0)


def test_default_readout_hints():
    clf = ToyAttentionClassifier.seeded(vocab_size=10, width=6, seed=0)
    gen = ToyAttentionGenerator.seeded(vocab_size=10, width=6, seed=0)
    assert default_readout(clf) == "mean"
    assert default_readout(gen) == "last"
    assert default_readout(FixedAttention("identity")) == "first"


# ---------------------------------------------------------------------------
# three-branch assembly
# ---------------------------------------------------------------------------


def _partition2(zetas=(30.0, 10.0)):
    return SegmentPartition((Segment(0, 3, zeta=zetas[0]), Segment(3, 6, zeta=zetas[1])), "coarse")


def test_refine_dampened_arithmetic():
    sens = SensitivityMap(np.array([0.9, 0.2, 0.6, 0.5, 0.3, 0.2]))
    refined = refine(sens, _partition2(), k=1, ig={0: 1.0}, rollout=np.full(6, 1 / 6), tau_shap=0.7, gamma=0.3)
    assert refined.provenance[3:] == ("dampened",) * 3
    assert refined.scores[3] == pytest.approx(0.15)  # 0.5 * 0.3


def test_refine_case_exhaustion_all_ig():
    sens = SensitivityMap(np.array([0.9, 0.8, 0.85, 0.95, 0.9, 0.86]))
    refined = refine(
        sens, _partition2(), k=2, ig={i: float(i) for i in range(6)},
        rollout=np.full(6, 1 / 6), tau_shap=0.1, gamma=0.3,
    )
    assert refined.provenance == ("ig",) * 6


def test_refine_mixed_hand_case():
    """Six tokens, two segments, K=1: hand-assembled banded case table."""
    sens = SensitivityMap(np.array([0.9, 0.2, 0.6, 0.1, 0.3, 0.2]))
    # mu = 0.3833...; sigma = 0.27938...; tau = 0.66272...
    tau = sens.mu + sens.sigma
    ig = {0: -2.0}
    rollout = np.array([0.10, 0.25, 0.30, 0.15, 0.10, 0.10])
    refined = refine(sens, _partition2(), k=1, ig=ig, rollout=rollout, tau_shap=tau, gamma=0.3)
    assert refined.provenance == ("ig", "rollout", "rollout", "dampened", "dampened", "dampened")
    expected = np.array(
        [
            IG_BAND[1],              # singleton IG family -> band top
            ROLLOUT_BAND[0],         # rollout family min (0.25 of {0.25, 0.30})
            ROLLOUT_BAND[1],         # rollout family max
            0.3 * 0.1,
            0.3 * 0.3,
            0.3 * 0.2,
        ]
    )
    np.testing.assert_allclose(refined.scores, expected, atol=1e-12)


def test_refine_branch_predicate_consistency():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        sens = SensitivityMap(rng.random(n))
        part = segment(_seq(n), sens)
        part = SegmentPartition(
            tuple(Segment(g.start, g.end, zeta=float(rng.random() * 40 + 1)) for g in part.segments),
            part.granularity,
        )
        k = adaptive_k(sens, part, 0.5)
        tau = sens.mu + sens.sigma
        ig = {i: float(rng.normal()) for i in range(n)}
        refined = refine(sens, part, k, ig, rng.random(n), tau_shap=tau, gamma=0.3)
        top = set()
        for si in top_k_segments(part, k):
            top.update(part.segments[si].positions())
        for i in range(n):
            if i in top and sens.scores[i] > tau:
                assert refined.provenance[i] == "ig"
            elif i in top:
                assert refined.provenance[i] == "rollout"
            else:
                assert refined.provenance[i] == "dampened"
        assert np.all(refined.scores >= 0) and np.all(refined.scores <= 1)


def test_refine_missing_ig_is_internal_error():
    sens = SensitivityMap(np.array([0.9, 0.2, 0.6, 0.1, 0.3, 0.2]))
    with pytest.raises(InternalError):
        refine(sens, _partition2(), k=1, ig={}, rollout=np.full(6, 1 / 6), tau_shap=0.66, gamma=0.3)


def test_refine_sequence_end_to_end(classifier, bigram):
    seq = TokenSequence.of([4, 5, 6, 7, 8, 9, 10])
    sens = SensitivityMap(np.array([0.1, 0.9, 0.3, 0.2, 0.1, 0.6, 0.2]))
    refined, partition, k = refine_sequence(
        classifier, bigram, seq, sens, ScalarTarget.class_logit(1), ig_steps=8
    )
    assert refined.n == seq.n
    assert partition.n == seq.n
    assert 1 <= k <= partition.m
    assert set(refined.provenance) <= {"ig", "rollout", "dampened"}


def test_refined_map_validation():
    with pytest.raises(InvalidInputError):
        RefinedSensitivityMap(np.array([0.5, 1.4]), ("ig", "ig"))
    with pytest.raises(InvalidInputError):
        RefinedSensitivityMap(np.array([0.5]), ("ig", "ig"))
