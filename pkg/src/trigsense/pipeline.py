"""End-to-end orchestration: phases, artifacts, and seeded determinism.

Phase order mirrors the attack recipe: clean-train the target, label a
slice of the corpus, fit the sensitivity predictor, refine per-input maps,
search triggers per input, poison, inject, evaluate. Every phase persists
an artifact carrying the config hash and seed; rerunning with the same
pair reproduces files byte for byte on the toy backends.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import artifacts as af
from .attribution import refine_sequence
from .config import ENV_RUN_ROOT, PipelineConfig
from .corpus import CorpusRecord, WhitespaceTokenizer, ingest_corpus
from .errors import (
    CapabilityMissingError,
    ConfigError,
    DataError,
    ToolkitError,
    UndefinedResultError,
)
from .evaluation import (
    DefenseReport,
    EvalReport,
    asr,
    attack_stealthiness,
    clean_accuracy,
    defense_report,
    perturbation_deltas,
    src,
)
from .oracle import RARE_ID, create_handle
from .oracle.base import ModelHandle
from .poisoning import PoisonConfig, apply_triggers, inject, poison_corpus
from .sensitivity import (
    PredictorConfig,
    SensitivityDataset,
    SensitivityPredictor,
    build_sensitivity_dataset,
    predict_sensitivity,
    select_sensitive_positions,
    train_predictor,
)
from .triggers import (
    TriggerCandidate,
    TriggerSet,
    filter_by_ppl,
    generate_candidates,
    greedy_nonoverlap,
    refined_positions,
    reward,
    select_optimal,
    select_top_k,
)
from .types import ScalarTarget, TokenSequence, TrainConfig, TrainExample

PHASES = ("label", "train-dmsa", "attribute", "triggers", "poison", "inject", "eval")


def purpose_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent deterministic stream per (seed, purpose)."""
    tag = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:4], "big")
    return np.random.default_rng([seed, tag])


# ---------------------------------------------------------------------------
# Handles and data plumbing
# ---------------------------------------------------------------------------


@dataclass
class Handles:
    target: ModelHandle
    scorer: ModelHandle
    embedder: ModelHandle
    surrogate_base: ModelHandle


def _toy_kwargs(cfg: PipelineConfig, vocab_size: int, backend_id: str, seed: int) -> dict:
    if backend_id == "toy:bigram":
        return {"vocab_size": vocab_size, "seed": cfg.scorer_seed}
    if backend_id == "toy:embedder":
        return {"vocab_size": vocab_size}
    if backend_id == "toy:classifier":
        return {
            "vocab_size": vocab_size,
            "n_classes": cfg.n_classes,
            "width": cfg.model_width,
            "heads": cfg.model_heads,
            "max_len": cfg.max_len,
            "seed": seed,
        }
    if backend_id == "toy:generator":
        return {
            "vocab_size": vocab_size,
            "width": cfg.model_width,
            "heads": cfg.model_heads,
            "max_len": cfg.max_len,
            "seed": seed,
        }
    return {}


def build_handles(cfg: PipelineConfig, vocab_size: int) -> Handles:
    target = create_handle(
        cfg.target_backend, **_toy_kwargs(cfg, vocab_size, cfg.target_backend, cfg.target_seed)
    )
    scorer = create_handle(
        cfg.scorer_backend, **_toy_kwargs(cfg, vocab_size, cfg.scorer_backend, cfg.scorer_seed)
    )
    embedder = create_handle(
        cfg.embedder_backend, **_toy_kwargs(cfg, vocab_size, cfg.embedder_backend, cfg.scorer_seed)
    )
    surrogate_backend = cfg.surrogate_backend or cfg.target_backend
    surrogate = create_handle(
        surrogate_backend, **_toy_kwargs(cfg, vocab_size, surrogate_backend, cfg.surrogate_seed)
    )
    return Handles(target, scorer, embedder, surrogate)


def split_records(
    cfg: PipelineConfig, records: Sequence[CorpusRecord]
) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
    """Deterministic train/eval split."""
    rng = purpose_rng(cfg.seed, "split")
    order = rng.permutation(len(records))
    n_eval = int(np.floor(cfg.eval_fraction * len(records)))
    eval_idx = set(int(i) for i in order[:n_eval])
    train = [r for i, r in enumerate(records) if i not in eval_idx]
    evals = [r for i, r in enumerate(records) if i in eval_idx]
    return train, evals


def adv_target(cfg: PipelineConfig) -> int | TokenSequence:
    adv = cfg.adversarial_target
    return TokenSequence.of(adv) if isinstance(adv, (list, tuple)) else int(adv)


def train_entry(cfg: PipelineConfig, record: CorpusRecord):
    """(id, input, target) for training; None when the record is unusable.

    Classification uses the record's label. Generation splits the sequence:
    the first half is the prompt, the second half the continuation target.
    """
    if cfg.task_type == "classification":
        if record.label is None:
            return None
        return (record.record_id, record.tokens, record.label)
    if record.tokens.n < 4:
        return None
    cut = record.tokens.n // 2
    return (
        record.record_id,
        TokenSequence.of(record.tokens.tokens[:cut]),
        TokenSequence.of(record.tokens.tokens[cut:]),
    )


def clean_train(cfg: PipelineConfig, target: ModelHandle, records: Sequence[CorpusRecord]) -> ModelHandle:
    """Fit the target on clean data before any poisoning."""
    if not target.supports_fine_tuning:
        return target
    entries = [e for e in (train_entry(cfg, r) for r in records) if e is not None]
    if not entries:
        raise DataError("no trainable records; classification corpora need labels")
    examples = [TrainExample(seq, tgt, "clean") for (_, seq, tgt) in entries]
    tc = TrainConfig(
        epochs=cfg.train_epochs, learning_rate=cfg.train_lr, batch_size=cfg.train_batch, seed=cfg.seed
    )
    return target.fine_tune(examples, eta=0.0, cfg=tc)


# ---------------------------------------------------------------------------
# Placement engine: predictor -> refinement -> spaced positions
# ---------------------------------------------------------------------------


@dataclass
class Placement:
    positions: list[int]  # preference order, pairwise >= L apart
    sens_scores: np.ndarray
    refined_scores: np.ndarray
    provenance: tuple[str, ...]
    partition_spans: list[tuple[int, int]]
    k_segments: int
    p_sens: list[int]


class PlacementEngine:
    """The per-input position flow shared by trigger search and poisoning."""

    def __init__(
        self,
        cfg: PipelineConfig,
        predictor: SensitivityPredictor,
        model: ModelHandle,
        scorer: ModelHandle,
        tokenizer: WhitespaceTokenizer | None = None,
    ):
        self.cfg = cfg
        self.predictor = predictor
        self.model = model
        self.scorer = scorer
        self.tokenizer = tokenizer

    def _target_spec(self, seq: TokenSequence) -> ScalarTarget:
        if self.model.task == "classification":
            return ScalarTarget.class_logit(self.model.predict(seq).predicted_class())
        adv = adv_target(self.cfg)
        cont = adv if isinstance(adv, TokenSequence) else self.model.predict(seq).sequence
        return ScalarTarget.continuation_loglik(cont)

    def analyze(self, seq: TokenSequence, context: str = "classification") -> Placement:
        cfg = self.cfg
        sens = predict_sensitivity(self.predictor, seq, context)
        p_sens = select_sensitive_positions(sens, cfg.rho)
        boundaries = self.tokenizer.sentence_boundaries(seq) if self.tokenizer else None
        refined, partition, k = refine_sequence(
            self.model,
            self.scorer,
            seq,
            sens,
            self._target_spec(seq),
            boundaries=boundaries or None,
            beta=cfg.beta,
            gamma=cfg.gamma,
            ig_steps=cfg.ig_steps,
            baseline=cfg.ig_baseline,
            fine_window=cfg.fine_window,
            coarse_window=cfg.coarse_window,
            dispersion_threshold=cfg.dispersion_threshold,
            rank_key=cfg.segment_rank_key,
        )
        # insertion threshold over refined scores, restricted to P_sens
        eligible = set(refined_positions(refined))
        candidates = [i for i in p_sens if i in eligible and i + cfg.trigger_len <= seq.n]
        if not candidates:
            pool = [i for i in p_sens if i + cfg.trigger_len <= seq.n]
            if not pool:
                pool = [i for i in range(seq.n) if i + cfg.trigger_len <= seq.n]
            candidates = [max(pool, key=lambda i: (refined.scores[i], -i))] if pool else []
        accepted = greedy_nonoverlap(candidates, refined.scores, cfg.trigger_len)
        preference = sorted(accepted, key=lambda i: (-refined.scores[i], i))
        return Placement(
            positions=preference,
            sens_scores=sens.scores,
            refined_scores=refined.scores,
            provenance=refined.provenance,
            partition_spans=[(s.start, s.end) for s in partition.segments],
            k_segments=k,
            p_sens=p_sens,
        )

    def position_fn(self, seq: TokenSequence) -> list[int]:
        return self.analyze(seq).positions


# ---------------------------------------------------------------------------
# Surrogate and trigger search
# ---------------------------------------------------------------------------


def candidate_model(handles: Handles) -> ModelHandle:
    """The LM that proposes trigger tokens: the target when it can sample,
    otherwise the scorer (classifier-only targets expose no sampling head)."""
    for handle in (handles.target, handles.scorer):
        if handle.is_encoder or handle.is_decoder:
            return handle
    raise CapabilityMissingError("no backend can generate trigger candidates")


def build_surrogate(
    cfg: PipelineConfig,
    handles: Handles,
    engine: PlacementEngine,
    records: Sequence[CorpusRecord],
) -> ModelHandle:
    """Lightweight proxy of a backdoored model.

    Trained on a small pool where a fraction carries the reserved rare token
    over the trigger window at the top predicted position, relabeled to the
    adversarial target.
    """
    rng = purpose_rng(cfg.seed, "surrogate")
    entries = [e for e in (train_entry(cfg, r) for r in records) if e is not None]
    pool = entries[: cfg.surrogate_pool]
    if not pool:
        raise DataError("surrogate training needs trainable records")
    n_poison = max(1, int(np.floor(cfg.surrogate_rate * len(pool))))
    chosen = set(int(i) for i in rng.choice(len(pool), size=n_poison, replace=False))
    placeholder = tuple([RARE_ID] * cfg.trigger_len)
    examples = []
    for i, (_, seq, tgt) in enumerate(pool):
        if i in chosen and seq.n >= cfg.trigger_len:
            positions = engine.position_fn(seq)
            pos = positions[0] if positions else max(0, seq.n - cfg.trigger_len)
            pos = min(pos, seq.n - cfg.trigger_len)
            examples.append(TrainExample(seq.replaced(pos, placeholder), adv_target(cfg), "poison"))
        else:
            examples.append(TrainExample(seq, tgt, "clean"))
    tc = TrainConfig(
        epochs=cfg.surrogate_epochs,
        learning_rate=cfg.train_lr,
        batch_size=cfg.train_batch,
        seed=cfg.surrogate_seed,
    )
    return handles.surrogate_base.fine_tune(examples, eta=cfg.eta if cfg.eta > 0 else 1.0, cfg=tc)


def search_triggers(
    cfg: PipelineConfig,
    seq: TokenSequence,
    placement: Placement,
    gen_model: ModelHandle,
    scorer: ModelHandle,
    surrogate: ModelHandle,
    clean_ppl: float,
    rng: np.random.Generator,
) -> TriggerSet:
    """Candidates, fluency filter, and reward ranking for one input."""
    tau_ppl = cfg.ppl_factor * clean_ppl
    positions = [p for p in placement.positions if p > 0 or gen_model.is_encoder]
    if not positions:
        positions = [min(1, seq.n - cfg.trigger_len)]
    per_position: dict[int, list[TriggerCandidate]] = {}
    for pos in positions:
        cands = generate_candidates(
            gen_model,
            seq,
            pos,
            trigger_len=cfg.trigger_len,
            num_samples=cfg.num_samples,
            rng=rng,
            temperature=cfg.temperature,
            scorer=scorer,
        )
        kept = filter_by_ppl(cands, tau_ppl)
        per_position[pos] = [
            reward(c, surrogate, adv_target(cfg), lam=cfg.lam, clean_ppl_baseline=clean_ppl)
            for c in kept
        ]
    best = select_optimal(per_position)
    return select_top_k(best, cfg.effective_k_triggers, trigger_len=cfg.trigger_len)


# ---------------------------------------------------------------------------
# The full run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    config_hash: str
    trigger_sets: dict[str, TriggerSet]
    eval_report: EvalReport | None = None
    defense: DefenseReport | None = None


def resolve_run_dir(cfg: PipelineConfig, root: str | None = None) -> Path:
    base = Path(root or os.environ.get(ENV_RUN_ROOT) or cfg.run_root)
    return base / f"run-{cfg.hash()}-s{cfg.seed}"


def run_pipeline(
    cfg: PipelineConfig,
    corpus_path: str | Path,
    run_dir: str | Path | None = None,
    until: str = "eval",
) -> RunResult:
    """Execute phases in order up to `until`, persisting artifacts.

    Failures abort with the phase name attached.
    """
    if until not in PHASES:
        raise ConfigError(f"unknown phase {until!r}; choose from {PHASES}")
    stop = PHASES.index(until)
    run_path = Path(run_dir) if run_dir else resolve_run_dir(cfg)
    run_path.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    cfg.to_file(run_path / af.CONFIG_FILE)

    phase = "ingest"
    current_input = ""
    try:
        records, tokenizer = ingest_corpus(corpus_path, max_vocab=cfg.vocab_size)
        tokenizer.save(run_path / af.TOKENIZER_FILE)
        handles = build_handles(cfg, tokenizer.vocab_size)
        train_recs, eval_recs = split_records(cfg, records)

        phase = "clean-train"
        model = clean_train(cfg, handles.target, train_recs)

        phase = "label"
        dataset = label_phase(cfg, train_recs, handles, run_path, chash)
        if stop < PHASES.index("train-dmsa"):
            return RunResult(run_path, chash, {})

        phase = "train-dmsa"
        predictor = train_phase(cfg, dataset, tokenizer.vocab_size)
        predictor.meta["config_hash"] = chash
        predictor.save(run_path / af.PREDICTOR_FILE)
        engine = PlacementEngine(cfg, predictor, model, handles.scorer, tokenizer)
        if stop < PHASES.index("attribute"):
            return RunResult(run_path, chash, {})

        phase = "attribute"
        placements: dict[str, Placement] = {}
        refined_rows = []
        for rec in train_recs:
            current_input = rec.record_id
            placements[rec.record_id] = engine.analyze(rec.tokens, rec.context)
            p = placements[rec.record_id]
            refined_rows.append(
                {
                    "input_id": rec.record_id,
                    "scores": [float(s) for s in p.refined_scores],
                    "provenance": list(p.provenance),
                    "partition": [list(span) for span in p.partition_spans],
                    "k": p.k_segments,
                    "tau_shap": "mean_plus_std",
                    "gamma": cfg.gamma,
                    "p_sens": p.p_sens,
                    "positions": p.positions,
                }
            )
        current_input = ""
        af.write_jsonl(run_path / af.REFINED_FILE, "refined-maps", chash, cfg.seed, refined_rows)
        if stop < PHASES.index("triggers"):
            return RunResult(run_path, chash, {})

        phase = "triggers"
        surrogate = build_surrogate(cfg, handles, engine, train_recs)
        gen_model = candidate_model(handles)
        clean_ppl = float(
            np.mean([handles.scorer.perplexity(r.tokens) for r in train_recs[: cfg.label_limit]])
        )
        trigger_sets: dict[str, TriggerSet] = {}
        trigger_rows = []
        rng = purpose_rng(cfg.seed, "candidates")
        for rec in train_recs:
            current_input = rec.record_id
            ts = search_triggers(
                cfg, rec.tokens, placements[rec.record_id], gen_model, handles.scorer,
                surrogate, clean_ppl, rng,
            )
            trigger_sets[rec.record_id] = ts
            trigger_rows.append(
                {
                    "input_id": rec.record_id,
                    "pairs": [
                        {
                            "position": p.position,
                            "tokens": list(p.tokens),
                            "reward": p.reward,
                            "attack_score": p.breakdown.attack_score,
                            "ppl_norm": p.breakdown.ppl_norm,
                        }
                        for p in ts.pairs
                    ],
                    "L": cfg.trigger_len,
                    "lambda": cfg.lam,
                    "tau_insert": cfg.tau_insert_frac,
                    "seed": cfg.seed,
                }
            )
        current_input = ""
        af.write_jsonl(run_path / af.TRIGGER_FILE, "trigger-manifest", chash, cfg.seed, trigger_rows)
        if stop < PHASES.index("poison"):
            return RunResult(run_path, chash, trigger_sets)

        phase = "poison"
        design_id = cfg.trigger_design_id or train_recs[0].record_id
        if design_id not in trigger_sets:
            raise ConfigError(f"trigger_design_id {design_id!r} has no trigger manifest")
        source = trigger_sets[design_id]
        pcfg = PoisonConfig(
            poison_rate=cfg.poison_rate,
            adversarial_target=adv_target(cfg),
            eta=cfg.eta,
            placement=cfg.placement_policy,
            seed=cfg.seed,
        )
        entries = [e for e in (train_entry(cfg, r) for r in train_recs) if e is not None]
        clean_entries, poisoned = poison_corpus(entries, source, pcfg, engine.position_fn)
        af.write_jsonl(
            run_path / af.POISONED_FILE,
            "poisoned-corpus",
            chash,
            cfg.seed,
            (
                {
                    "id": p.original_id,
                    "tokens": list(p.sequence.tokens),
                    "label": p.target if isinstance(p.target, int) else list(p.target.tokens),
                    "flag": p.flag,
                    "placements": [[pos, list(toks)] for pos, toks in p.placements],
                }
                for p in poisoned
            ),
        )
        if stop < PHASES.index("inject"):
            return RunResult(run_path, chash, trigger_sets)

        phase = "inject"
        tc = TrainConfig(
            epochs=cfg.train_epochs, learning_rate=cfg.train_lr, batch_size=cfg.train_batch, seed=cfg.seed
        )
        backdoored, injection = inject(model, clean_entries, poisoned, cfg.eta, tc)
        if hasattr(backdoored, "save"):
            backdoored.save(run_path / af.MODEL_FILE)
        af.write_report(
            run_path / af.INJECTION_FILE, "injection-report", chash, cfg.seed, injection.to_dict()
        )
        if stop < PHASES.index("eval"):
            return RunResult(run_path, chash, trigger_sets)

        phase = "eval"
        eval_report, defense = evaluate(cfg, handles, model, backdoored, predictor, engine, source, eval_recs, chash)
        af.write_report(run_path / af.EVAL_FILE, "eval-report", chash, cfg.seed, eval_report.to_dict())
        af.write_report(run_path / af.DEFENSE_FILE, "defense-report", chash, cfg.seed, defense.to_dict())
        return RunResult(run_path, chash, trigger_sets, eval_report, defense)
    except ToolkitError as exc:
        suffix = f" (input {current_input})" if current_input else ""
        exc.args = (f"[phase {phase}{suffix}] {exc}",)
        raise


def label_phase(
    cfg: PipelineConfig,
    records: Sequence[CorpusRecord],
    handles: Handles,
    run_path: Path,
    chash: str,
) -> SensitivityDataset:
    subset = [r for r in records if r.tokens.n >= 2][: cfg.label_limit]
    if not subset:
        raise DataError("no corpus records long enough to label")
    corpus = [(r.record_id, r.tokens, r.context) for r in subset]
    dataset = build_sensitivity_dataset(corpus, handles.scorer, handles.embedder, cfg.alpha_by_context)
    af.write_jsonl(
        run_path / af.SENSITIVITY_FILE,
        "sensitivity-labels",
        chash,
        cfg.seed,
        (
            {
                "input_id": rec.input_id,
                "tokens": list(rec.sequence.tokens),
                "scores": [float(s) for s in rec.labels.scores],
                "alpha": rec.alpha,
                "context": rec.context,
            }
            for rec in dataset.records
        ),
    )
    return dataset


def train_phase(cfg: PipelineConfig, dataset: SensitivityDataset, vocab_size: int) -> SensitivityPredictor:
    pc = PredictorConfig(
        epochs=cfg.predictor_epochs,
        learning_rate=cfg.predictor_lr,
        hidden=cfg.predictor_hidden,
        window=cfg.predictor_window,
        seed=cfg.seed,
        vocab_size=vocab_size,
    )
    return train_predictor(dataset, pc)


def evaluate(
    cfg: PipelineConfig,
    handles: Handles,
    clean_model: ModelHandle,
    backdoored: ModelHandle,
    predictor: SensitivityPredictor,
    engine: PlacementEngine,
    trigger_source: TriggerSet,
    eval_recs: Sequence[CorpusRecord],
    chash: str,
) -> tuple[EvalReport, DefenseReport]:
    """Attack, stealth, ranking-correlation, and defense metrics on held-out data."""
    if not eval_recs:
        raise DataError("no evaluation records; lower eval_fraction or grow the corpus")
    adv = adv_target(cfg)
    groups = [tuple(p.tokens) for p in trigger_source.pairs]

    eval_pool = eval_recs[: cfg.eval_sample]
    triggered: list[tuple[TokenSequence, list[int]]] = []
    originals = []
    for rec in eval_pool:
        if isinstance(adv, int) and rec.label is not None and rec.label == adv:
            continue
        if rec.tokens.n < max(2, cfg.trigger_len):
            continue
        positions = engine.position_fn(rec.tokens)
        new_seq, placed = apply_triggers(rec.tokens, positions, groups)
        trig_positions = sorted({p for pos, toks in placed for p in range(pos, pos + len(toks))})
        triggered.append((new_seq, trig_positions))
        originals.append(rec.tokens)

    report = EvalReport(
        config_hash=chash, seed=cfg.seed, n_clean=len(eval_pool), n_triggered=len(triggered)
    )
    if triggered:
        report.asr_percent = asr(backdoored, [seq for seq, _ in triggered], adv)
        report.as_values = [
            attack_stealthiness(handles.scorer, handles.embedder, orig, mod)
            for orig, (mod, _) in zip(originals, triggered)
        ]
    labeled = [(r.tokens, r.label) for r in eval_pool if r.label is not None]
    if labeled and cfg.task_type == "classification":
        report.clean_accuracy = clean_accuracy(backdoored, labeled)
        report.baseline_accuracy = clean_accuracy(clean_model, labeled)

    src_values = []
    for rec in eval_pool[: cfg.src_sample]:
        if rec.tokens.n < 2:
            continue
        pred = predict_sensitivity(predictor, rec.tokens, rec.context)
        truth = perturbation_deltas(clean_model, rec.tokens, neutral_token=clean_model.mask_id or 0)
        try:
            src_values.append(src(pred.scores, truth))
        except UndefinedResultError:
            continue
    report.src_values = src_values

    defense = defense_report(handles.scorer, triggered) if triggered else DefenseReport()
    report.evasion_rate = defense.evasion_rate if triggered else None
    return report, defense
