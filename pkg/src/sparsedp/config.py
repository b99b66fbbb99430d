"""Experiment configuration: a flat, commented ``key = value`` text file.

Every field of :class:`ExperimentConfig` has a default, so a config file
only needs the keys it changes. ``parse_config(serialize_config(c)) == c``
for every valid config.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from . import accountant
from .errors import InvalidParameterError
from .mechanisms import PrivacyBudget
from .trainer import MODES, ClipSpec, SelectionStrategy, TrainConfig


class ConfigError(InvalidParameterError):
    """Malformed config text or an unknown key."""


@dataclass(frozen=True)
class ExperimentConfig:
    # corpus preprocessing
    vocab_size: int = 1000
    window: int = 4
    negatives: int = 8
    train_size: int = 200_000
    val_size: int = 100_000
    test_size: int = 200_000
    stop_words: str = "builtin"
    embedding_dim: int = 100
    init_scale: float = 0.005

    # training
    mode: str = "sparse_exp"
    batch_size: int = 20
    learning_rate: float = 0.001
    epochs: int = 20
    gamma: float = 0.001
    s1: float = 15.0
    s2: float = 1.0
    s0: float = 0.1
    optimizer: str = "sgd"
    selection_method: str = "sequential"
    sv_alpha: float = 0.05
    sv_c1: int = 0

    # privacy: either derive sigma, eps' and delta' from the total budget split,
    # or give them directly
    derive_from_budget: bool = True
    eps_noise: float = 20.0
    eps_selection: float = 10.0
    delta: float = 1e-5
    noise_multiplier: float = 0.5
    selection_epsilon: float = 1.0
    delta_prime: float = 1e-8

    # canary evaluation
    canary_count: int = 1000
    canary_nc: int = 0
    canary_sample_size: int = 10_000
    canary_bins: int = 10
    control_count: int = 1000

    # io
    corpus: str = ""
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("vocab_size", "window", "batch_size", "embedding_dim", "canary_bins",
                     "canary_sample_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("negatives", "train_size", "val_size", "test_size", "epochs", "sv_c1",
                     "canary_count", "canary_nc", "control_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not (0 < self.delta < 1) or not (0 < self.delta_prime < 1):
            raise ConfigError("delta and delta_prime must lie in (0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * (self.train_size // self.batch_size)

    def privacy_parameters(self, n: int | None = None) -> tuple[float, float, float]:
        """(selection eps', delta', sigma) for a training set of ``n`` samples."""
        if not self.derive_from_budget:
            return self.selection_epsilon, self.delta_prime, self.noise_multiplier
        n = self.train_size if n is None else n
        T = self.epochs * (n // self.batch_size)
        return accountant.plan_sparse_sgd(self.eps_noise, self.eps_selection, self.delta,
                                          self.batch_size, n, max(T, 1))

    def train_config(self, n: int | None = None, mode: str | None = None) -> TrainConfig:
        mode = mode or self.mode
        eps_sel, delta_prime, sigma = self.privacy_parameters(n)
        if mode == "dp_sgd":
            # DP-SGD has no selection stage: its noise absorbs the whole per-step budget
            sigma = accountant.matched_dpsgd_sigma(eps_sel, delta_prime, sigma)
        kind = {"sparse_sv": "sparse_vector", "sparse_uniform": "uniform"}.get(mode, "exponential")
        selection = SelectionStrategy(kind, PrivacyBudget(eps_sel, delta_prime),
                                      alpha=self.sv_alpha, c1=self.sv_c1 or None,
                                      method=self.selection_method)
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           epochs=self.epochs, noise_multiplier=sigma, gamma=self.gamma,
                           clip=ClipSpec(self.s1, self.s2, self.s0), selection=selection,
                           delta_prime=delta_prime, seed=self.seed, optimizer=self.optimizer)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _parse_value(name: str, text: str):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if kind == "int":
            return int(text.replace("_", ""))
        return _TYPES[kind](text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``key=value`` strings (as given on the command line)."""
    changes = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _FIELDS:
            raise ConfigError(f"bad override {item!r}; expected key=value with a known key")
        changes[key] = _parse_value(key, value.strip())
    return dataclasses.replace(cfg, **changes)


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value.strip())
    return ExperimentConfig(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = ["# sparsedp experiment config"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
