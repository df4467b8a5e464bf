"""Pipeline orchestration: phases, artifacts, containment, determinism."""

import hashlib
import json

import numpy as np
import pytest

from trigsense import artifacts as af
from trigsense.config import PipelineConfig
from trigsense.corpus import write_corpus
from trigsense.datagen import make_keyword_task
from trigsense.errors import ConfigError
from trigsense.pipeline import (
    PHASES,
    build_handles,
    purpose_rng,
    resolve_run_dir,
    run_pipeline,
    split_records,
)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corpus")
    task = make_keyword_task(n_examples=60, vocab_size=80, seed=4)
    path = tmp / "corpus.jsonl"
    write_corpus(path, task.records)
    return path


def _cfg(**over):
    base = dict(
        vocab_size=80,
        seed=1,
        label_limit=30,
        predictor_epochs=120,
        train_epochs=4,
        eval_sample=10,
        src_sample=4,
        ig_steps=8,
        num_samples=8,
    )
    base.update(over)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def full_run(small_corpus, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run") / "r1"
    with pytest.warns(UserWarning):
        result = run_pipeline(_cfg(), small_corpus, run_dir=run_dir)
    return result


def test_all_phase_artifacts_written(full_run):
    names = {p.name for p in full_run.run_dir.iterdir()}
    assert {
        af.CONFIG_FILE,
        af.TOKENIZER_FILE,
        af.SENSITIVITY_FILE,
        af.PREDICTOR_FILE,
        af.REFINED_FILE,
        af.TRIGGER_FILE,
        af.POISONED_FILE,
        af.INJECTION_FILE,
        af.MODEL_FILE,
        af.EVAL_FILE,
        af.DEFENSE_FILE,
    } <= names


def test_artifacts_schema_valid(full_run):
    for name in (af.SENSITIVITY_FILE, af.REFINED_FILE, af.TRIGGER_FILE, af.POISONED_FILE):
        header, rows = af.read_jsonl(full_run.run_dir / name)
        assert header["schema_version"] == af.SCHEMA_VERSION
        assert header["config_hash"] == full_run.config_hash
    for name in (af.INJECTION_FILE, af.EVAL_FILE, af.DEFENSE_FILE):
        doc = af.read_report(full_run.run_dir / name)
        assert doc["config_hash"] == full_run.config_hash


def test_eval_report_contents(full_run):
    report = full_run.eval_report
    assert report is not None
    assert 0.0 <= report.asr_percent <= 100.0
    assert all(0.0 <= v <= 1.0 for v in report.as_values)
    assert report.clean_accuracy is not None
    assert full_run.defense.evasion_rate is not None


def test_trigger_positions_contained_in_sensitive_set(full_run):
    """Final trigger positions come from the coarse-selected candidate set."""
    _, rows = af.read_jsonl(full_run.run_dir / af.REFINED_FILE)
    refined_by_id = {r["input_id"]: r for r in rows}
    _, manifests = af.read_jsonl(full_run.run_dir / af.TRIGGER_FILE)
    assert manifests
    for manifest in manifests:
        p_sens = set(refined_by_id[manifest["input_id"]]["p_sens"])
        placed = {pair["position"] for pair in manifest["pairs"]}
        assert placed <= p_sens


def test_trigger_manifest_spacing_and_rewards(full_run):
    _, manifests = af.read_jsonl(full_run.run_dir / af.TRIGGER_FILE)
    for manifest in manifests:
        rewards = [p["reward"] for p in manifest["pairs"]]
        assert rewards == sorted(rewards, reverse=True)
        positions = sorted(p["position"] for p in manifest["pairs"])
        for a, b in zip(positions, positions[1:]):
            assert b - a >= manifest["L"]


def test_poisoned_subset_size_and_placements(full_run, small_corpus):
    header, rows = af.read_jsonl(full_run.run_dir / af.POISONED_FILE)
    # 60 records, eval_fraction 0.2 -> 48 train; floor(0.1 * 48) = 4
    assert len(rows) == 4
    for row in rows:
        assert row["flag"] == "poison"
        assert row["placements"]


def test_rerun_reproduces_artifacts_bitwise(small_corpus, tmp_path):
    cfg = _cfg()
    with pytest.warns(UserWarning):
        a = run_pipeline(cfg, small_corpus, run_dir=tmp_path / "a")
    with pytest.warns(UserWarning):
        b = run_pipeline(cfg, small_corpus, run_dir=tmp_path / "b")
    for path_a in sorted(a.run_dir.iterdir()):
        path_b = b.run_dir / path_a.name
        assert hashlib.sha256(path_a.read_bytes()).digest() == hashlib.sha256(
            path_b.read_bytes()
        ).digest(), f"{path_a.name} differs between identical runs"


def test_seed_changes_artifacts(small_corpus, tmp_path):
    with pytest.warns(UserWarning):
        a = run_pipeline(_cfg(seed=1), small_corpus, run_dir=tmp_path / "a")
        b = run_pipeline(_cfg(seed=2), small_corpus, run_dir=tmp_path / "b")
    assert (a.run_dir / af.TRIGGER_FILE).read_bytes() != (b.run_dir / af.TRIGGER_FILE).read_bytes()


def test_partial_run_stops_at_phase(small_corpus, tmp_path):
    result = run_pipeline(_cfg(), small_corpus, run_dir=tmp_path / "p", until="train-dmsa")
    names = {p.name for p in result.run_dir.iterdir()}
    assert af.PREDICTOR_FILE in names
    assert af.TRIGGER_FILE not in names
    with pytest.raises(ConfigError):
        run_pipeline(_cfg(), small_corpus, run_dir=tmp_path / "q", until="nonsense")


def test_phase_error_names_the_phase(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"id": "a", "text": "hello world"}) + "\n")
    # unlabeled classification corpus cannot clean-train
    with pytest.raises(Exception, match="phase"):
        run_pipeline(_cfg(), bad, run_dir=tmp_path / "r")


def test_split_is_deterministic_and_disjoint(small_corpus):
    from trigsense.corpus import ingest_corpus

    records, _ = ingest_corpus(small_corpus)
    cfg = _cfg()
    train_a, eval_a = split_records(cfg, records)
    train_b, eval_b = split_records(cfg, records)
    assert [r.record_id for r in train_a] == [r.record_id for r in train_b]
    assert {r.record_id for r in train_a}.isdisjoint({r.record_id for r in eval_a})
    assert len(eval_a) == int(np.floor(cfg.eval_fraction * len(records)))


def test_resolve_run_dir_uses_hash_and_seed(monkeypatch, tmp_path):
    cfg = _cfg(seed=5)
    monkeypatch.setenv("TRIGSENSE_RUNS", str(tmp_path / "root"))
    path = resolve_run_dir(cfg)
    assert path.name == f"run-{cfg.hash()}-s5"
    assert path.parent == tmp_path / "root"


def test_purpose_rng_streams_are_stable():
    a = purpose_rng(3, "candidates").integers(0, 1000, size=4)
    b = purpose_rng(3, "candidates").integers(0, 1000, size=4)
    c = purpose_rng(3, "surrogate").integers(0, 1000, size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_build_handles_roles(small_corpus):
    cfg = _cfg()
    handles = build_handles(cfg, vocab_size=80)
    assert handles.target.task == "classification"
    assert handles.scorer.supports_scoring
    assert handles.embedder.supports_embedding
    assert handles.surrogate_base.task == "classification"
    assert PHASES[-1] == "eval"
