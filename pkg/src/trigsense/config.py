"""Pipeline configuration: defaults, validation, flat-file parsing, hashing.

The on-disk format is a flat, human-editable key = value file ('#' starts a
comment; values parse as JSON scalars, falling back to plain strings). CLI
flags override file keys. The config hash is order-independent.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError

ENV_RUN_ROOT = "TRIGSENSE_RUNS"


@dataclass
class PipelineConfig:
    # backends
    target_backend: str = "toy:classifier"
    scorer_backend: str = "toy:bigram"
    embedder_backend: str = "toy:embedder"
    surrogate_backend: str = ""  # empty: derive from the target backend
    vocab_size: int = 64
    n_classes: int = 2
    model_width: int = 12
    model_heads: int = 1
    max_len: int = 64
    target_seed: int = 11
    scorer_seed: int = 7
    surrogate_seed: int = 13

    # task + sensitivity labeling
    task_type: str = "classification"
    alpha_classification: float = 0.6
    alpha_generation: float = 0.4
    rho: float = 0.2
    label_limit: int = 100

    # predictor training
    predictor_epochs: int = 250
    predictor_lr: float = 0.02
    predictor_hidden: int = 32
    predictor_window: int = 2

    # attribution refinement
    beta: float = 0.5
    gamma: float = 0.3
    ig_steps: int = 32
    ig_baseline: str = "mask"
    fine_window: int = 5
    coarse_window: int = 20
    dispersion_threshold: float = 0.15
    segment_rank_key: str = "zeta"

    # trigger search
    tau_insert_frac: float = 0.75
    trigger_len: int = 2
    k_triggers: int = 0  # 0: task default (3 classification / 4 generation)
    num_samples: int = 20
    temperature: float = 1.0
    ppl_factor: float = 1.5
    lam: float = 0.7
    surrogate_pool: int = 40
    surrogate_rate: float = 0.3
    surrogate_epochs: int = 6

    # poisoning + injection
    poison_rate: float = 0.1
    eta: float = 1.0
    adversarial_target: int = 1
    placement_policy: str = "per-example"
    train_epochs: int = 8
    train_lr: float = 0.05
    train_batch: int = 64

    # evaluation
    eval_fraction: float = 0.2
    eval_sample: int = 50
    src_sample: int = 10

    # run control
    seed: int = 0
    run_root: str = "runs"
    trigger_design_id: str = ""  # empty: first corpus record

    _RANGES = {
        "rho": (0.0, 1.0, "exclusive-min"),
        "alpha_classification": (0.0, 1.0, "inclusive"),
        "alpha_generation": (0.0, 1.0, "inclusive"),
        "gamma": (0.0, 1.0, "exclusive"),
        "tau_insert_frac": (0.0, 1.0, "inclusive"),
        "lam": (0.0, 1.0, "inclusive"),
        "poison_rate": (0.0, 1.0, "inclusive"),
        "eval_fraction": (0.0, 1.0, "inclusive"),
        "surrogate_rate": (0.0, 1.0, "inclusive"),
        "temperature": (0.0, float("inf"), "inclusive"),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key, (lo, hi, kind) in self._RANGES.items():
            value = getattr(self, key)
            if kind == "inclusive" and not lo <= value <= hi:
                raise ConfigError(f"{key} must lie in [{lo}, {hi}], got {value}")
            if kind == "exclusive" and not lo < value < hi:
                raise ConfigError(f"{key} must lie in ({lo}, {hi}), got {value}")
            if kind == "exclusive-min" and not lo < value <= hi:
                raise ConfigError(f"{key} must lie in ({lo}, {hi}], got {value}")
        for key in (
            "vocab_size", "n_classes", "model_width", "model_heads", "max_len",
            "trigger_len", "num_samples", "train_epochs", "train_batch",
            "predictor_epochs", "ig_steps", "fine_window", "coarse_window",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.k_triggers < 0:
            raise ConfigError("k_triggers must be >= 0 (0 means the task default)")
        if self.task_type not in ("classification", "generation"):
            raise ConfigError(f"unsupported task_type {self.task_type!r}")
        if self.placement_policy not in ("per-example", "fixed"):
            raise ConfigError(f"unsupported placement_policy {self.placement_policy!r}")
        if self.ig_baseline not in ("mask", "zeros"):
            raise ConfigError("ig_baseline must be 'mask' or 'zeros'")
        if self.segment_rank_key not in ("zeta", "sensitivity"):
            raise ConfigError("segment_rank_key must be 'zeta' or 'sensitivity'")

    @property
    def effective_k_triggers(self) -> int:
        if self.k_triggers > 0:
            return self.k_triggers
        return 4 if self.task_type == "generation" else 3

    @property
    def alpha_by_context(self) -> dict[str, float]:
        return {
            "classification": self.alpha_classification,
            "generation": self.alpha_generation,
        }

    # -- file round trip ------------------------------------------------------
    _FILE_KEYS = {"lambda": "lam"}  # file spelling -> attribute

    def to_file(self, path: str | Path):
        attr_to_key = {v: k for k, v in self._FILE_KEYS.items()}
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name.startswith("_"):
                continue
            key = attr_to_key.get(f.name, f.name)
            lines.append(f"{key} = {json.dumps(getattr(self, f.name))}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            values[key.strip()] = _parse_value(val.strip())
        return cls.from_dict(values, overrides)

    @classmethod
    def from_dict(cls, values: dict, overrides: dict | None = None) -> "PipelineConfig":
        merged = dict(values)
        if overrides:
            merged.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls) if not f.name.startswith("_")}
        kwargs = {}
        for key, value in merged.items():
            attr = cls._FILE_KEYS.get(key, key)
            if attr not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[attr] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if not k.startswith("_")}

    def hash(self) -> str:
        """Stable digest over sorted key=value pairs."""
        canonical = "\n".join(
            f"{k}={json.dumps(v, sort_keys=True)}" for k, v in sorted(self.to_dict().items())
        )
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
