"""Experiment configuration: a flat `key = value` text format.

One assignment per line, `#` starts a comment line, and list-valued
fields are comma-separated. Sweep axes (C, eta, strategy, master_seed,
beta) may hold lists; everything else is scalar. The effective config
can be serialized back out and re-parsed to an equal config, so a run
directory always carries a re-runnable record of what produced it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace

DATASETS = ("mnist", "fmnist", "cifar10", "synthetic")
STRATEGIES = ("grad_norm", "loss", "random", "full")
AXIS_KEYS = ("C", "eta", "strategy", "master_seed", "beta")


class ConfigError(ValueError):
    """Invalid configuration; message carries file/line context."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully-resolved scalar parameters of a single run."""

    dataset: str
    K: int
    C: int
    beta: float
    eta: float
    T: int
    output_dir: str
    strategy: str = "grad_norm"
    batch_size: int = 64
    master_seed: int = 1
    partition_seed: int = 0
    min_shard_size: int = 10
    eval_stride: int = 1
    checkpoint_stride: int = 0
    report_rounds: tuple[int, ...] = ()
    weighted_aggregation: bool = False
    full_train_loss: bool = False
    workers: int = 1
    # mnist/fmnist
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # cifar10
    train_batches: tuple[str, ...] = ()
    test_batches: tuple[str, ...] = ()
    # synthetic
    synth_train_n: int = 2000
    synth_test_n: int = 500
    synth_dim: int = 10
    synth_classes: int = 3
    synth_seed: int = 0

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not (1 <= self.C <= self.K):
            raise ConfigError(f"C must satisfy 1 <= C <= K={self.K}, got {self.C}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.min_shard_size < 1:
            raise ConfigError(f"min_shard_size must be >= 1, got {self.min_shard_size}")
        if self.eval_stride < 1:
            raise ConfigError(f"eval_stride must be >= 1, got {self.eval_stride}")
        if self.checkpoint_stride < 0:
            raise ConfigError(f"checkpoint_stride must be >= 0, got {self.checkpoint_stride}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        for r in self.report_rounds:
            if not (1 <= r <= self.T):
                raise ConfigError(f"report_rounds entry {r} outside [1, T={self.T}]")
            if r % self.eval_stride != 0:
                raise ConfigError(
                    f"report_rounds entry {r} is not a multiple of eval_stride={self.eval_stride}"
                )
        if self.dataset in ("mnist", "fmnist"):
            missing = [
                key
                for key in ("train_images", "train_labels", "test_images", "test_labels")
                if not getattr(self, key)
            ]
            if missing:
                raise ConfigError(f"dataset {self.dataset} requires keys: {', '.join(missing)}")
        elif self.dataset == "cifar10":
            if not self.train_batches or not self.test_batches:
                raise ConfigError("dataset cifar10 requires train_batches and test_batches")
        else:
            for key in ("synth_train_n", "synth_test_n", "synth_dim", "synth_classes"):
                if getattr(self, key) < 1:
                    raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")

    def to_text(self) -> str:
        """Serialize in the same flat format `parse_config` accepts."""
        lines = ["# gradfed experiment config (effective values)"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                if not value:
                    continue
                text = ", ".join(_scalar_text(v) for v in value)
            else:
                text = _scalar_text(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepSpec:
    """A base config plus axis lists to cross-product over."""

    base: ExperimentConfig
    axes: dict = field(default_factory=dict)

    def cells(self) -> list[tuple[dict, ExperimentConfig]]:
        """All (axis assignment, config) cells, in deterministic order."""
        keys = [k for k in AXIS_KEYS if k in self.axes]
        named = [k for k in keys if len(self.axes[k]) > 1]
        out = []
        for values in itertools.product(*(self.axes[k] for k in keys)):
            assignment = dict(zip(keys, values))
            cfg = replace(self.base, **assignment)
            if named:
                cell_name = "_".join(f"{k}{assignment[k]}" for k in named)
                cfg = replace(cfg, output_dir=f"{self.base.output_dir}/cells/{cell_name}")
            cfg.validate()
            out.append((assignment, cfg))
        return out


def _scalar_text(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_lines(text: str, source: str) -> dict[str, tuple[str, int]]:
    entries: dict[str, tuple[str, int]] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = (value, lineno)
    return entries


_INT_KEYS = {
    "K", "C", "T", "batch_size", "master_seed", "partition_seed", "min_shard_size",
    "eval_stride", "checkpoint_stride", "workers",
    "synth_train_n", "synth_test_n", "synth_dim", "synth_classes", "synth_seed",
}
_FLOAT_KEYS = {"beta", "eta"}
_BOOL_KEYS = {"weighted_aggregation", "full_train_loss"}
_STR_KEYS = {
    "dataset", "strategy", "output_dir",
    "train_images", "train_labels", "test_images", "test_labels",
}
_LIST_KEYS = {"train_batches", "test_batches", "report_rounds"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS | _LIST_KEYS


def _convert(key: str, text: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
    except ValueError:
        kind = "an integer" if key in _INT_KEYS else "a number"
        raise ConfigError(f"{where}: {key} must be {kind}, got {text!r}") from None
    if key in _BOOL_KEYS:
        lowered = text.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: {key} must be true or false, got {text!r}")
    return text


def parse_config(text: str, source: str = "<config>") -> SweepSpec:
    """Parse config text into a base config plus sweep axes.

    Semantic errors are reported against the line that set the offending
    key, so a bad config fails with `file:line: message`.
    """
    entries = _parse_lines(text, source)

    def where(key: str) -> str:
        if key in entries:
            return f"{source}:{entries[key][1]}"
        return source

    values: dict = {}
    axes: dict = {}
    for key, (raw, lineno) in entries.items():
        loc = f"{source}:{lineno}"
        if key not in _ALL_KEYS:
            raise ConfigError(f"{loc}: unknown key {key!r}")
        parts = [p.strip() for p in raw.split(",")] if raw else [""]
        if key in _LIST_KEYS:
            if key == "report_rounds":
                values[key] = tuple(_convert_int(p, key, loc) for p in parts if p)
            else:
                values[key] = tuple(p for p in parts if p)
        elif key in AXIS_KEYS:
            converted = [_convert(key, p, loc) for p in parts if p]
            if not converted:
                raise ConfigError(f"{loc}: {key} has no values")
            axes[key] = converted
            values[key] = converted[0]
        else:
            if len(parts) > 1:
                raise ConfigError(f"{loc}: {key} takes a single value, got a list")
            values[key] = _convert(key, parts[0], loc)

    required = ["dataset", "K", "beta", "eta", "T", "output_dir"]
    strategies = axes.get("strategy", [values.get("strategy", "grad_norm")])
    if "C" not in values:
        # Full participation never reads C; default it so configs can omit it.
        if strategies == ["full"] and "K" in values:
            values["C"] = values["K"]
        else:
            required.append("C")
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(sorted(missing))}")

    base = ExperimentConfig(**values)
    try:
        base.validate()
        for key in AXIS_KEYS:
            for value in axes.get(key, []):
                replace(base, **{key: value}).validate()
    except ConfigError as exc:
        key = _offending_key(str(exc))
        raise ConfigError(f"{where(key)}: {exc}") from None
    return SweepSpec(base=base, axes=axes)


def _offending_key(message: str) -> str:
    """Best-effort map from a validation message to the key it concerns."""
    for key in sorted(_ALL_KEYS, key=len, reverse=True):
        if message.startswith(key):
            return key
    return "dataset"


def _convert_int(text: str, key: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{where}: {key} entries must be integers, got {text!r}") from None


def load_config(path) -> SweepSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def single_run_config(spec: SweepSpec, source: str = "<config>") -> ExperimentConfig:
    """The one config of a sweep-free spec; rejects multi-valued axes."""
    multi = [k for k, v in spec.axes.items() if len(v) > 1]
    if multi:
        raise ConfigError(
            f"{source}: keys {', '.join(multi)} hold lists; use the sweep command"
        )
    return spec.base
