"""Command-line surface.

One subcommand per pipeline boundary: label, train-dmsa, adapt-dmsa,
attribute, triggers, poison, inject, eval, report, run-all (plus
make-corpus for synthetic demo data). Config comes from a flat key = value
file; flags override file keys; TRIGSENSE_RUNS overrides the run root.

Exit codes: 0 success, 2 config error, 3 data error, 4 capability missing.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import PipelineConfig
from .corpus import ingest_corpus, write_corpus
from .errors import CapabilityMissingError, ConfigError, DataError, ToolkitError
from .pipeline import run_pipeline

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CAPABILITY = 4


def _load_config(config_path: str | None, sets: tuple[str, ...], seed: int | None) -> PipelineConfig:
    overrides: dict = {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        from .config import _parse_value

        overrides[key.strip()] = _parse_value(val.strip())
    if seed is not None:
        overrides["seed"] = seed
    if config_path:
        return PipelineConfig.from_file(config_path, overrides)
    return PipelineConfig.from_dict({}, overrides)


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="flat key = value config file")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                      help="override a config key (repeatable)")(fn)
    fn = click.option("--seed", type=int, default=None, help="override the global seed")(fn)
    fn = click.option("--run-dir", type=click.Path(), default=None,
                      help="run directory (default: derived from config hash + seed)")(fn)
    return fn


@click.group()
def main():
    """Sensitivity-guided backdoor trigger toolkit."""


def _phase_command(name: str, until: str, help_text: str):
    @main.command(name=name, help=help_text)
    @click.argument("corpus", type=click.Path(exists=True))
    @_common
    def cmd(corpus, config_path, sets, seed, run_dir, _until=until):
        cfg = _load_config(config_path, sets, seed)
        result = run_pipeline(cfg, corpus, run_dir=run_dir, until=_until)
        click.echo(f"phase '{_until}' complete; artifacts in {result.run_dir}")

    return cmd


_phase_command("label", "label", "Build ground-truth sensitivity labels for a corpus.")
_phase_command("train-dmsa", "train-dmsa", "Train the sensitivity predictor from labels.")
_phase_command("attribute", "attribute", "Refine per-input maps (segments, IG, rollout).")
_phase_command("triggers", "triggers", "Generate and rank trigger candidates per input.")
_phase_command("poison", "poison", "Construct the poisoned training corpus.")
_phase_command("inject", "inject", "Fine-tune the backdoored model on the mixed corpus.")
_phase_command("eval", "eval", "Run the full pipeline and compute all metrics.")


@main.command(name="run-all", help="Run every phase end to end (same as eval).")
@click.argument("corpus", type=click.Path(exists=True))
@_common
def run_all(corpus, config_path, sets, seed, run_dir):
    cfg = _load_config(config_path, sets, seed)
    result = run_pipeline(cfg, corpus, run_dir=run_dir, until="eval")
    from .reporting import summarize, write_summary

    write_summary(result.run_dir)
    _, text = summarize(result.run_dir)
    click.echo(text)


@main.command(name="adapt-dmsa", help="Few-shot adapt a trained predictor on a new corpus.")
@click.argument("corpus", type=click.Path(exists=True))
@click.option("--predictor", "predictor_path", type=click.Path(exists=True), required=True,
              help="existing predictor checkpoint (.npz)")
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="where to write the adapted checkpoint")
@click.option("--epochs", type=int, default=150)
@_common
def adapt_dmsa(corpus, predictor_path, out_path, epochs, config_path, sets, seed, run_dir):
    cfg = _load_config(config_path, sets, seed)
    from .pipeline import build_handles
    from .sensitivity import (
        PredictorConfig,
        SensitivityPredictor,
        adapt_predictor,
        build_sensitivity_dataset,
    )

    records, tokenizer = ingest_corpus(corpus, max_vocab=cfg.vocab_size)
    handles = build_handles(cfg, tokenizer.vocab_size)
    usable = [(r.record_id, r.tokens, r.context) for r in records if r.tokens.n >= 2]
    dataset = build_sensitivity_dataset(usable, handles.scorer, handles.embedder, cfg.alpha_by_context)
    predictor = SensitivityPredictor.load(predictor_path)
    adapted = adapt_predictor(
        predictor, dataset, PredictorConfig(epochs=epochs, learning_rate=cfg.predictor_lr, seed=cfg.seed)
    )
    adapted.save(out_path)
    click.echo(f"adapted predictor on {dataset.n_records} records -> {out_path}")


@main.command(name="report", help="Summarize one or more runs; optionally emit plots.")
@click.argument("run_dirs", type=click.Path(exists=True), nargs=-1, required=True)
@click.option("--plots", is_flag=True, help="write ASR-curve and sensitivity-bar images")
def report(run_dirs, plots):
    from .reporting import plot_asr_curve, plot_sensitivity_bars, summarize, write_summary

    for rd in run_dirs:
        write_summary(rd)
        _, text = summarize(rd)
        click.echo(text)
        click.echo("")
    if plots:
        plot_dir = Path(run_dirs[0]) / "plots"
        try:
            curve = plot_asr_curve(run_dirs, plot_dir / "asr_curve.png")
            click.echo(f"wrote {curve}")
        except DataError as exc:
            click.echo(f"asr curve skipped: {exc}")
        bars = plot_sensitivity_bars(run_dirs[0], plot_dir / "sensitivity.png")
        click.echo(f"wrote {bars}")


@main.command(name="make-corpus", help="Generate a synthetic keyword-sentiment corpus.")
@click.argument("out", type=click.Path())
@click.option("--examples", type=int, default=500)
@click.option("--vocab-size", type=int, default=150)
@click.option("--seed", type=int, default=0)
def make_corpus(out, examples, vocab_size, seed):
    from .datagen import make_keyword_task

    task = make_keyword_task(n_examples=examples, vocab_size=vocab_size, seed=seed)
    write_corpus(out, task.records)
    click.echo(f"wrote {len(task.records)} records to {out} (vocab {task.vocab_size})")


def cli_main() -> int:
    """Console-script wrapper translating errors to exit codes."""
    return entrypoint()


def entrypoint(argv: list[str] | None = None) -> int:
    try:
        main.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except CapabilityMissingError as exc:
        click.echo(f"capability missing: {exc}", err=True)
        return EXIT_CAPABILITY
    except ToolkitError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(entrypoint())
