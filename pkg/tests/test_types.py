"""Value-type invariants."""

import numpy as np
import pytest

from trigsense.errors import InvalidInputError
from trigsense.types import (
    AttentionStack,
    ScalarTarget,
    TaskOutput,
    TokenDistribution,
    TokenSequence,
    cosine_similarity,
    unit_normalize,
)


def test_token_sequence_basics():
    seq = TokenSequence.of([3, 1, 2])
    assert seq.n == 3
    with pytest.raises(InvalidInputError):
        TokenSequence.of([])
    with pytest.raises(InvalidInputError):
        TokenSequence.of([-1])


def test_token_sequence_is_immutable():
    seq = TokenSequence.of([3, 1, 2])
    replaced = seq.replaced(1, [7, 8])
    assert seq.tokens == (3, 1, 2)
    assert replaced.tokens == (3, 7, 8)
    with pytest.raises(InvalidInputError):
        seq.replaced(2, [7, 8])


def test_token_sequence_without():
    seq = TokenSequence.of([3, 1, 2])
    assert seq.without(1).tokens == (3, 2)
    with pytest.raises(InvalidInputError):
        TokenSequence.of([5]).without(0)


def test_distribution_validation():
    TokenDistribution(np.array([0.5, 0.5]))
    with pytest.raises(InvalidInputError):
        TokenDistribution(np.array([0.7, 0.7]))
    with pytest.raises(InvalidInputError):
        TokenDistribution(np.array([-0.1, 1.1]))


def test_distribution_sampling_greedy_and_seeded():
    dist = TokenDistribution(np.array([0.1, 0.2, 0.7]))
    assert dist.sample(np.random.default_rng(0), temperature=0.0) == 2
    a = [dist.sample(np.random.default_rng(5)) for _ in range(4)]
    b = [dist.sample(np.random.default_rng(5)) for _ in range(4)]
    assert a == b


def test_attention_stack_row_sums():
    ok = np.tile(np.eye(3), (2, 2, 1, 1))
    AttentionStack(ok)
    bad = ok.copy()
    bad[0, 0, 0, 0] = 0.5
    with pytest.raises(InvalidInputError):
        AttentionStack(bad)


def test_task_output_one_of():
    with pytest.raises(InvalidInputError):
        TaskOutput()
    with pytest.raises(InvalidInputError):
        TaskOutput(logits=np.array([1.0]), sequence=TokenSequence.of([1]))
    out = TaskOutput(logits=np.array([0.1, 0.9]))
    assert out.predicted_class() == 1


def test_scalar_target_validation():
    ScalarTarget.class_logit(1)
    ScalarTarget.continuation_loglik(TokenSequence.of([1, 2]))
    with pytest.raises(InvalidInputError):
        ScalarTarget(kind="weird")
    with pytest.raises(InvalidInputError):
        ScalarTarget(kind="class_logit")


def test_cosine_identity_is_exactly_one(rng):
    v = rng.normal(size=9)
    assert cosine_similarity(v, v.copy()) == 1.0
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_unit_normalize():
    v = unit_normalize(np.array([3.0, 4.0]))
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    z = unit_normalize(np.zeros(3))
    assert abs(np.linalg.norm(z) - 1.0) < 1e-12
