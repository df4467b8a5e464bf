"""Human-readable run summaries and optional plot emission."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from . import artifacts as af
from .errors import ConfigError, DataError

NOT_COMPUTED = "not computed"


def load_run(run_dir: str | Path) -> dict:
    """Collect whatever artifacts a run directory holds."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory {run_dir} does not exist")
    out: dict = {"run_dir": str(run_dir)}
    for key, name, kind in (
        ("eval", af.EVAL_FILE, "report"),
        ("defense", af.DEFENSE_FILE, "report"),
        ("injection", af.INJECTION_FILE, "report"),
    ):
        path = run_dir / name
        out[key] = af.read_report(path) if path.exists() else None
    for key, name in (("triggers", af.TRIGGER_FILE), ("sensitivity", af.SENSITIVITY_FILE),
                      ("refined", af.REFINED_FILE)):
        path = run_dir / name
        if path.exists():
            header, rows = af.read_jsonl(path)
            out[key] = {"header": header, "rows": rows}
        else:
            out[key] = None
    config_path = run_dir / af.CONFIG_FILE
    out["config"] = config_path.read_text(encoding="utf-8") if config_path.exists() else None
    return out


def _fmt(value, digits=3) -> str:
    if value is None:
        return NOT_COMPUTED
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def summarize(run_dir: str | Path) -> tuple[dict, str]:
    """(machine-readable summary, printable text) for one run."""
    data = load_run(run_dir)
    ev = data["eval"]
    summary = {
        "run_dir": data["run_dir"],
        "config_hash": (ev or {}).get("config_hash")
        or ((data["triggers"] or {}).get("header", {}).get("config_hash")),
        "asr_percent": (ev or {}).get("asr_percent"),
        "as_mean": (ev or {}).get("as_mean"),
        "src_mean": (ev or {}).get("src_mean"),
        "evasion_rate": (ev or {}).get("evasion_rate"),
        "clean_accuracy": (ev or {}).get("clean_accuracy"),
        "baseline_accuracy": (ev or {}).get("baseline_accuracy"),
        "n_trigger_manifests": len((data["triggers"] or {}).get("rows", []))
        if data["triggers"]
        else None,
    }
    lines = [
        f"run: {summary['run_dir']}",
        f"config hash: {summary['config_hash'] or NOT_COMPUTED}",
        f"attack success rate (%): {_fmt(summary['asr_percent'], 1)}",
        f"attack stealthiness (mean): {_fmt(summary['as_mean'])}",
        f"sensitivity ranking correlation (mean): {_fmt(summary['src_mean'])}",
        f"defense evasion rate: {_fmt(summary['evasion_rate'])}",
        f"clean accuracy (backdoored / baseline): "
        f"{_fmt(summary['clean_accuracy'])} / {_fmt(summary['baseline_accuracy'])}",
        f"trigger manifests: {_fmt(summary['n_trigger_manifests'], 0)}",
    ]
    return summary, "\n".join(lines)


def write_summary(run_dir: str | Path) -> Path:
    summary, _ = summarize(run_dir)
    run_dir = Path(run_dir)
    ev = (load_run(run_dir)["eval"]) or {}
    af.write_report(
        run_dir / af.REPORT_FILE,
        "run-summary",
        summary.get("config_hash") or "",
        int(ev.get("seed", 0)),
        summary,
    )
    return run_dir / af.REPORT_FILE


def _matplotlib():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        return plt
    except ImportError as exc:
        raise ConfigError(
            "plot emission needs matplotlib: pip install 'trigsense[plots]'"
        ) from exc


def plot_asr_curve(run_dirs: Sequence[str | Path], out_path: str | Path) -> Path:
    """ASR against poison rate across runs (one point per run)."""
    plt = _matplotlib()
    points = []
    for rd in run_dirs:
        data = load_run(rd)
        if not data["eval"] or data["eval"].get("asr_percent") is None:
            continue
        rate = None
        for line in (data["config"] or "").splitlines():
            if line.split("=")[0].strip() == "poison_rate":
                rate = float(line.split("=", 1)[1])
        points.append((rate if rate is not None else 0.0, data["eval"]["asr_percent"]))
    if not points:
        raise DataError("no evaluated runs to plot")
    points.sort()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xlabel("poison rate")
    ax.set_ylabel("attack success rate (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_sensitivity_bars(run_dir: str | Path, out_path: str | Path, input_id: str | None = None) -> Path:
    """Heat bars of coarse labels vs refined scores for one input."""
    plt = _matplotlib()
    data = load_run(run_dir)
    if not data["refined"]:
        raise DataError("run has no refined-map artifact to plot")
    rows = data["refined"]["rows"]
    row = next((r for r in rows if r["input_id"] == input_id), rows[0]) if rows else None
    if row is None:
        raise DataError("refined-map artifact is empty")
    sens_row = None
    if data["sensitivity"]:
        sens_row = next(
            (r for r in data["sensitivity"]["rows"] if r["input_id"] == row["input_id"]), None
        )
    fig, axes = plt.subplots(2 if sens_row else 1, 1, figsize=(6, 2.6), squeeze=False)
    if sens_row:
        axes[0][0].imshow([sens_row["scores"]], aspect="auto", cmap="viridis", vmin=0, vmax=1)
        axes[0][0].set_yticks([])
        axes[0][0].set_title(f"labels: {row['input_id']}", fontsize=8)
    ax = axes[-1][0]
    ax.imshow([row["scores"]], aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_yticks([])
    ax.set_title(f"refined: {row['input_id']}", fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
