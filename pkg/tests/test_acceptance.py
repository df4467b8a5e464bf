"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line with its measured numbers.

Budgets are asserted in wall-clock seconds with generous headroom; every
tolerance is pinned here, not deferred.
"""

import hashlib
import math
import time
import warnings

import numpy as np
import pytest

from trigsense import artifacts as af
from trigsense.attribution import adaptive_k, ig_attribution, refine, refine_sequence, segment, top_k_segments
from trigsense.attribution import Segment, SegmentPartition
from trigsense.config import PipelineConfig
from trigsense.corpus import write_corpus
from trigsense.datagen import make_keyword_task
from trigsense.evaluation import (
    asr,
    attack_stealthiness,
    clean_accuracy,
    defense_report,
    src,
)
from trigsense.oracle import (
    MASK_ID,
    N_SPECIALS,
    RARE_ID,
    ToyAttentionClassifier,
    ToyBigramLM,
    ToyOneHotEmbedder,
)
from trigsense.oracle.stubs import LinearScorer
from trigsense.pipeline import PlacementEngine, purpose_rng, run_pipeline
from trigsense.poisoning import PoisonConfig, apply_triggers, inject, poison_corpus
from trigsense.sensitivity import (
    PredictorConfig,
    SensitivityMap,
    build_sensitivity_dataset,
    ground_truth_sensitivity,
    quantile_threshold,
    select_sensitive_positions,
    train_predictor,
)
from trigsense.triggers import filter_by_ppl, generate_candidates, greedy_nonoverlap, ppl_threshold
from trigsense.types import ScalarTarget, TokenSequence, TrainConfig, TrainExample


def _report(name: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


# ---------------------------------------------------------------------------
# Criterion: rank-correlation oracle equivalence
# ---------------------------------------------------------------------------


def _brute_spearman(a, b):
    """Definitional ties-free formula: 1 - 6 sum d^2 / (n (n^2 - 1))."""
    a, b = np.asarray(a), np.asarray(b)
    n = len(a)
    ra = np.empty(n)
    rb = np.empty(n)
    ra[np.argsort(a)] = np.arange(1, n + 1)
    rb[np.argsort(b)] = np.arange(1, n + 1)
    d2 = ((ra - rb) ** 2).sum()
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def test_spearman_matches_brute_force_definition():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        a = rng.permutation(n) + rng.random(n) * 0.01  # ties-free by construction
        b = rng.permutation(n) + rng.random(n) * 0.01
        worst = max(worst, abs(src(a, b) - _brute_spearman(a, b)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 5.0
    _report("spearman-oracle-equivalence", ok, f"max |diff| {worst:.2e} over 1000 pairs, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# Criterion: path-attribution axioms on the toy backend
# ---------------------------------------------------------------------------


def test_integrated_gradient_axioms():
    rng = np.random.default_rng(23)
    start = time.perf_counter()

    # linearity: closed form is exact for any step count
    emb = rng.normal(size=(12, 5))
    weights = rng.normal(size=(10, 5))
    lin = LinearScorer(emb, weights)
    seq = TokenSequence.of([4, 5, 6, 7])
    expected = (emb[[4, 5, 6, 7]] * weights[:4]).sum(axis=1)
    linear_err = 0.0
    for steps in (1, 8, 64):
        phi = ig_attribution(lin, seq, ScalarTarget.class_logit(0), steps=steps, baseline="zeros")
        linear_err = max(linear_err, float(np.abs(phi - expected).max()))

    # completeness over 100 seeded instances at 256 steps
    worst_gap = 0.0
    for i in range(100):
        inst = np.random.default_rng(1000 + i)
        model = ToyAttentionClassifier.seeded(
            vocab_size=24, n_classes=2, width=8, heads=1, seed=int(inst.integers(1, 10_000))
        )
        n = int(inst.integers(2, 10))
        s = TokenSequence.of(inst.integers(4, 24, size=n))
        target = ScalarTarget.class_logit(int(inst.integers(0, 2)))
        phi = ig_attribution(model, s, target, steps=256, baseline="mask")
        gap = model.target_value(s, target, 1.0) - model.target_value(s, target, 0.0)
        worst_gap = max(worst_gap, abs(float(phi.sum()) - gap))
    elapsed = time.perf_counter() - start
    ok = linear_err <= 1e-12 and worst_gap <= 1e-3 and elapsed < 30.0
    _report(
        "integrated-gradient-axioms", ok,
        f"linear closed-form err {linear_err:.2e}, worst completeness gap {worst_gap:.2e} "
        f"over 100 instances, {elapsed:.1f}s",
    )
    assert linear_err <= 1e-12  # closed form up to float accumulation
    assert worst_gap <= 1e-3
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# Criterion: exact coalition-value regression (KNOWN RED)
# ---------------------------------------------------------------------------


def _exact_shapley(model, seq, target_class):
    """Brute-force oracle over all 2^n masked coalitions; value = target logit."""
    n = seq.n
    values = {}
    for mask in range(1 << n):
        toks = [seq.tokens[i] if (mask >> i) & 1 else MASK_ID for i in range(n)]
        values[mask] = float(model.predict(TokenSequence.of(toks)).logits[target_class])
    fact = [math.factorial(i) for i in range(n + 1)]
    phi = np.zeros(n)
    for i in range(n):
        for mask in range(1 << n):
            if (mask >> i) & 1:
                continue
            size = bin(mask).count("1")
            weight = fact[size] * fact[n - size - 1] / fact[n]
            phi[i] += weight * (values[mask | (1 << i)] - values[mask])
    return phi


def _phrase_task():
    """Tiered evidence phrases: probes and model influence agree, the regime
    hierarchical refinement is designed for."""
    V = 40
    ev_ids = list(range(N_SPECIALS, N_SPECIALS + 6))
    ev_w = {ev_ids[0]: 3, ev_ids[1]: 2, ev_ids[2]: 1, ev_ids[3]: -3, ev_ids[4]: -2, ev_ids[5]: -1}
    fill_lo = N_SPECIALS + 6
    boosts = [(r, t, 15.0 * abs(w)) for t, w in ev_w.items() for r in range(V)]
    scorer = ToyBigramLM(vocab_size=V, seed=3, boosts=boosts, smoothness=3.0)
    embedder = ToyOneHotEmbedder(V)

    def sample(rng, n, phrase_len):
        toks = [int(rng.integers(fill_lo, V)) for _ in range(n)]
        start = int(rng.integers(0, n - phrase_len + 1))
        total = 0
        for off in range(phrase_len):
            t = int(rng.choice(ev_ids))
            toks[start + off] = t
            total += ev_w[t]
        if total == 0:
            return None
        return toks, (1 if total > 0 else 0)

    rng = np.random.default_rng(77)
    train = []
    while len(train) < 800:
        out = sample(rng, int(rng.integers(6, 12)), int(rng.integers(2, 4)))
        if out:
            train.append(out)
    base = ToyAttentionClassifier.seeded(vocab_size=V, n_classes=2, width=16, heads=2, seed=5)
    model = base.fine_tune(
        [TrainExample(TokenSequence.of(t), y, "clean") for t, y in train],
        0.0,
        TrainConfig(epochs=12, learning_rate=0.05, batch_size=32, seed=9),
    )
    return scorer, embedder, model, sample


SHAPLEY_MEAN_BASELINE = 0.6962  # regression pin: measured mean Spearman of this protocol


def test_exact_shapley_regression_known_red():
    """Faithful three-branch refinement vs brute-force coalition values.

    This criterion is implemented as specified and left failing: the
    composition spends exact-style attribution only on coarse-map peaks
    (strictly under half the tokens), so the assembled ranking cannot beat
    a per-instance 95th-percentile permutation null on 90% of instances at
    n=8. The measured ceiling across every variant tried is ~72%. The mean
    correlation is pinned as the regression baseline either way.
    """
    start = time.perf_counter()
    scorer, embedder, model, sample = _phrase_task()
    rng_master = np.random.default_rng(2024)
    passes, corrs = 0, []
    for _ in range(50):
        seed = int(rng_master.integers(0, 2**31))
        rng = np.random.default_rng(seed)
        out = None
        while out is None:
            out = sample(rng, 8, 3)
        seq = TokenSequence.of(out[0])
        target_class = model.predict(seq).predicted_class()
        phi = np.abs(_exact_shapley(model, seq, target_class))
        sens = ground_truth_sensitivity(scorer, embedder, seq, 0.6)
        refined, _, _ = refine_sequence(
            model, scorer, seq, sens, ScalarTarget.class_logit(target_class),
            ig_steps=64, rank_key="sensitivity",
        )
        rho = src(refined.scores, phi)
        perm_rng = np.random.default_rng(seed ^ 0x5EED)
        null = [src(refined.scores[perm_rng.permutation(8)], phi) for _ in range(1000)]
        passes += rho > float(np.quantile(null, 0.95))
        corrs.append(rho)
    mean_corr = float(np.mean(corrs))
    elapsed = time.perf_counter() - start
    ok = passes >= 45 and mean_corr >= SHAPLEY_MEAN_BASELINE - 0.02 and elapsed < 120.0
    _report(
        "exact-shapley-regression", ok,
        f"null-beating instances {passes}/50 (need >= 45), mean Spearman {mean_corr:.4f} "
        f"(baseline {SHAPLEY_MEAN_BASELINE}), {elapsed:.1f}s",
    )
    assert mean_corr >= SHAPLEY_MEAN_BASELINE - 0.02, "regression below the pinned mean"
    assert elapsed < 120.0
    assert passes >= 45, (
        f"refined ranking beat the permutation null on {passes}/50 instances; the 90% bar "
        "is unattainable for the faithful three-branch assembly at n=8 (see the analysis "
        "in this test's docstring); components measured at |IG| 0.95, rollout 0.73"
    )


# ---------------------------------------------------------------------------
# Criterion: quantile / selection invariants over 10,000 random maps
# ---------------------------------------------------------------------------


def test_selection_invariants_bulk():
    rng = np.random.default_rng(37)
    start = time.perf_counter()
    violations = 0
    for i in range(10_000):
        n = int(rng.integers(1, 30))
        sens = SensitivityMap(rng.random(n))

        rho = float(rng.uniform(0.05, 1.0))
        selected = select_sensitive_positions(sens, rho)
        tau = quantile_threshold(sens.scores, rho)
        ties = int((sens.scores == tau).sum())
        if not (rho * n - 1e-9 <= len(selected) <= rho * n + ties + 1e-9):
            violations += 1

        trig_len = int(rng.integers(1, 5))
        pool = list(rng.choice(max(n, 2), size=min(n, 6), replace=False))
        accepted = greedy_nonoverlap(pool, {p: float(rng.random()) for p in pool}, trig_len)
        if any(abs(a - b) < trig_len for a in accepted for b in accepted if a != b):
            violations += 1

        if n >= 2 and i % 4 == 0:  # branch correctness is the slow check
            part = segment(TokenSequence.of(range(4, 4 + n)), sens)
            part = SegmentPartition(
                tuple(Segment(s.start, s.end, zeta=float(rng.random() * 30 + 1)) for s in part.segments),
                part.granularity,
            )
            k = adaptive_k(sens, part, 0.5)
            if not 1 <= k <= part.m:
                violations += 1
            tau_shap = sens.mu + sens.sigma
            ig = {j: float(rng.normal()) for j in range(n)}
            refined = refine(sens, part, k, ig, rng.random(n), tau_shap=tau_shap, gamma=0.3)
            top = set()
            for si in top_k_segments(part, k):
                top.update(part.segments[si].positions())
            for j in range(n):
                expected = (
                    "ig" if j in top and sens.scores[j] > tau_shap
                    else "rollout" if j in top
                    else "dampened"
                )
                if refined.provenance[j] != expected:
                    violations += 1
                    break
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 30.0
    _report("selection-invariants", ok, f"{violations} violations over 10,000 maps, {elapsed:.1f}s")
    assert violations == 0
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# Criterion: metric identities
# ---------------------------------------------------------------------------


def test_metric_identities():
    rng = np.random.default_rng(53)
    start = time.perf_counter()
    scorer = ToyBigramLM(vocab_size=40, seed=5)
    embedder = ToyOneHotEmbedder(40)

    as_exact = True
    for _ in range(100):
        n = int(rng.integers(1, 16))
        seq = TokenSequence.of(rng.integers(4, 40, size=n))
        if attack_stealthiness(scorer, embedder, seq, seq) != 0.5:
            as_exact = False
            break

    src_identity = True
    monotone_invariant = True
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        if src(a, a) != 1.0:
            src_identity = False
            break
        base = src(a, b)
        if src(np.exp(a), b) != base or src(a, b * 2.5 + 1.0) != base:
            monotone_invariant = False
            break
    elapsed = time.perf_counter() - start
    ok = as_exact and src_identity and monotone_invariant and elapsed < 10.0
    _report(
        "metric-identities", ok,
        f"AS(X,X)=0.5 exact: {as_exact}, src(a,a)=1: {src_identity}, "
        f"monotone-invariant: {monotone_invariant}, {elapsed:.1f}s",
    )
    assert as_exact and src_identity and monotone_invariant
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# Criterion: end-to-end desk-scale attack (paired placement policies)
# ---------------------------------------------------------------------------


def _paired_attack_run(run_seed: int):
    task = make_keyword_task(n_examples=2000, vocab_size=150, seed=run_seed, scorer_seed=7)
    records = list(task.records)
    cfg = PipelineConfig(
        vocab_size=150, seed=run_seed, label_limit=150, predictor_epochs=300,
        train_epochs=5, ig_steps=16,
    )
    order = purpose_rng(run_seed, "exp-split").permutation(len(records))
    eval_recs = [records[i] for i in order[:400]]
    train_recs = [records[i] for i in order[400:]]

    target = ToyAttentionClassifier.seeded(
        vocab_size=task.vocab_size, n_classes=2, width=12, heads=1, max_len=64, seed=11
    )
    tc = TrainConfig(epochs=5, learning_rate=0.05, batch_size=64, seed=run_seed)
    clean_model = target.fine_tune(
        [TrainExample(r.tokens, r.label, "clean") for r in train_recs], 0.0, tc
    )
    labeled_eval = [(r.tokens, r.label) for r in eval_recs]
    base_acc = clean_accuracy(clean_model, labeled_eval)

    labeled = [(r.record_id, r.tokens, r.context) for r in train_recs[: cfg.label_limit]]
    dataset = build_sensitivity_dataset(labeled, task.scorer, task.embedder, cfg.alpha_by_context)
    predictor = train_predictor(
        dataset, PredictorConfig(epochs=300, seed=run_seed, vocab_size=task.vocab_size)
    )
    engine = PlacementEngine(cfg, predictor, clean_model, task.scorer)

    trigger_tokens = [(task.filler_range[0] + 6, task.filler_range[0] + 7)]  # fixed pair
    target_class = 1
    entries = [(r.record_id, r.tokens, r.label) for r in train_recs]

    results = {}
    for policy in ("guided", "random"):
        rand_rng = purpose_rng(run_seed, "random-placement")
        if policy == "guided":
            position_fn = engine.position_fn
        else:
            def position_fn(seq, rand_rng=rand_rng):
                return [int(rand_rng.integers(0, seq.n - 1))]

        pcfg = PoisonConfig(poison_rate=0.05, adversarial_target=target_class, eta=1.0, seed=run_seed)
        clean_entries, poisoned = poison_corpus(entries, trigger_tokens, pcfg, position_fn)
        backdoored, _ = inject(clean_model, clean_entries, poisoned, 1.0, tc)
        triggered = []
        for rec in eval_recs:
            if rec.label == target_class:
                continue
            positions = position_fn(rec.tokens)
            seq, _ = apply_triggers(rec.tokens, positions, trigger_tokens)
            triggered.append(seq)
        results[policy] = (
            asr(backdoored, triggered, target_class),
            clean_accuracy(backdoored, labeled_eval),
        )
    return results, base_acc


def test_end_to_end_attack_direction():
    start = time.perf_counter()
    wins = 0
    max_degradation = 0.0
    lines = []
    for run_seed in range(10):
        results, base_acc = _paired_attack_run(run_seed)
        guided_asr, guided_acc = results["guided"]
        random_asr, _ = results["random"]
        win = guided_asr >= random_asr
        wins += win
        degradation = (base_acc - guided_acc) * 100.0
        max_degradation = max(max_degradation, degradation)
        lines.append(
            f"seed {run_seed}: guided {guided_asr:.1f} vs random {random_asr:.1f} "
            f"({'win' if win else 'loss'}), degradation {degradation:+.1f}pts"
        )
        assert degradation <= 5.0, f"clean accuracy degraded {degradation:.1f} points at seed {run_seed}"
    elapsed = time.perf_counter() - start
    ok = wins >= 8 and elapsed < 600.0
    _report(
        "end-to-end-attack-direction", ok,
        f"guided placement wins {wins}/10 paired runs, max degradation {max_degradation:.1f}pts, "
        f"{elapsed:.0f}s",
    )
    for line in lines:
        print("   ", line)
    assert wins >= 8
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# Criterion: defense-resistance direction
# ---------------------------------------------------------------------------


def test_defense_resistance_direction():
    start = time.perf_counter()
    wins = 0
    for run_seed in range(10):
        task = make_keyword_task(n_examples=60, vocab_size=120, seed=run_seed, scorer_seed=7)
        scorer = task.scorer
        rng = purpose_rng(run_seed, "defense")
        clean_ppl = float(np.mean([scorer.perplexity(r.tokens) for r in task.records[:40]]))
        tau = ppl_threshold([clean_ppl])
        stealthy, rare = [], []
        for rec in task.records[:30]:
            seq = rec.tokens
            pos = int(rng.integers(1, seq.n - 2))
            cands = generate_candidates(
                scorer, seq, pos, trigger_len=2, num_samples=20, rng=rng, scorer=scorer
            )
            best = min(filter_by_ppl(cands, tau), key=lambda c: c.context_ppl)
            stealthy.append((best.substituted, [pos, pos + 1]))
            rare.append((seq.replaced(pos, (RARE_ID, RARE_ID)), [pos, pos + 1]))
        evasion_stealthy = defense_report(scorer, stealthy).evasion_rate
        evasion_rare = defense_report(scorer, rare).evasion_rate
        wins += evasion_stealthy >= evasion_rare
    elapsed = time.perf_counter() - start
    ok = wins >= 8 and elapsed < 300.0
    _report(
        "defense-resistance-direction", ok,
        f"fluency-filtered triggers evade at least as often in {wins}/10 runs, {elapsed:.1f}s",
    )
    assert wins >= 8
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# Criterion: bitwise determinism of a full run
# ---------------------------------------------------------------------------


def test_run_all_bitwise_determinism(tmp_path):
    task = make_keyword_task(n_examples=50, vocab_size=80, seed=4)
    corpus_path = tmp_path / "corpus.jsonl"
    write_corpus(corpus_path, task.records)
    cfg = PipelineConfig(
        vocab_size=80, seed=1, label_limit=25, predictor_epochs=100, train_epochs=3,
        eval_sample=8, src_sample=3, ig_steps=8, num_samples=6,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = run_pipeline(cfg, corpus_path, run_dir=tmp_path / "a")
        b = run_pipeline(cfg, corpus_path, run_dir=tmp_path / "b")
    compared = []
    identical = True
    for name in (af.TRIGGER_FILE, af.EVAL_FILE, af.DEFENSE_FILE, af.INJECTION_FILE, af.POISONED_FILE):
        da = hashlib.sha256((a.run_dir / name).read_bytes()).hexdigest()
        db = hashlib.sha256((b.run_dir / name).read_bytes()).hexdigest()
        compared.append(name)
        identical &= da == db
    _report("run-determinism", identical, f"{len(compared)} artifacts bitwise identical: {identical}")
    assert identical
