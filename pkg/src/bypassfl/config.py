"""
Experiment configuration: a flat ``key = value`` text format.

Lines may carry ``#`` comments. Values are integers, reals, ``true``/``false``,
bare words, or bracketed lists (``[[64, 32], [48]]``). Unknown keys are
rejected and missing keys fall back to the defaults below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError

METHODS = ("mh-pflgb", "local-only", "fedavg", "fedavg-ft")
REGIMES = ("label-skew", "resolution")
AGGREGATIONS = ("samples", "uniform")

# Distinct widths per client; every local model is far larger than the bypass.
DEFAULT_LABEL_SKEW_CLIENTS = [
    [64, 32], [96, 32], [64, 48], [128, 64],
    [48, 24], [80, 40], [64, 64, 32], [128, 32],
]
# Deeper models for higher-resolution clients (factor 1 first).
DEFAULT_RESOLUTION_CLIENTS = [[128, 96, 64], [96, 64, 48], [64, 48], [48]]
DEFAULT_FACTORS = [1, 2, 4, 8]


@dataclass
class ExperimentConfig:
    method: str = "mh-pflgb"
    regime: str = "label-skew"
    clients: list[list[int]] | None = None
    bypass: list[int] = field(default_factory=lambda: [8])
    rounds: int = 100
    epochs_local: int = 4
    epochs_global: int = 1
    batch_size: int = 8
    lr_local: float = 1e-4
    lr_global: float = 1e-5
    lambda_l_loc: float = 0.9
    lambda_g_loc: float = 0.1
    lambda_g_glob: float = 0.9
    lambda_l_glob: float = 0.1
    optimizer: str = "adam"
    reset_optimizer: bool = False
    aggregation: str = "samples"
    finetune_epochs: int = 5
    n_samples: int = 2000
    n_features: int = 32
    n_classes: int | None = None
    separation: float = 3.0
    alpha: float = 0.5
    factors: list[int] | None = None
    test_fraction: float = 0.2
    seed: int = 0
    no_global_head: bool = False
    no_global_body: bool = False
    no_fusion: bool = False
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.resolve()
        self.validate()

    def resolve(self) -> None:
        """Fill regime-dependent defaults."""
        if self.n_classes is None:
            self.n_classes = 4 if self.regime == "label-skew" else 3
        if self.regime == "resolution" and self.factors is None:
            self.factors = list(DEFAULT_FACTORS)
        if self.clients is None:
            if self.regime == "resolution":
                self.clients = [list(c) for c in DEFAULT_RESOLUTION_CLIENTS[: len(self.factors)]]
            else:
                self.clients = [list(c) for c in DEFAULT_LABEL_SKEW_CLIENTS]

    def validate(self) -> None:
        def bad(name: str, why: str):
            raise ConfigError(f"invalid {name}: {why}")

        for name, allowed in (("method", METHODS), ("regime", REGIMES),
                              ("optimizer", ("adam", "sgd")), ("aggregation", AGGREGATIONS)):
            if getattr(self, name) not in allowed:
                bad(name, f"{getattr(self, name)!r} not in {list(allowed)}")
        for name in ("rounds", "epochs_local", "epochs_global", "batch_size", "n_samples",
                     "n_features", "n_classes"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.finetune_epochs < 0:
            bad("finetune_epochs", "must be >= 0")
        for name in ("lr_local", "lr_global", "separation", "alpha"):
            if not getattr(self, name) > 0:
                bad(name, "must be > 0")
        for name in ("lambda_l_loc", "lambda_g_loc", "lambda_g_glob", "lambda_l_glob"):
            if not getattr(self, name) >= 0:
                bad(name, "must be >= 0")
        if not 0 < self.test_fraction < 1:
            bad("test_fraction", "must lie in (0, 1)")
        if not self.clients:
            bad("clients", "need at least one client")
        for spec in list(self.clients) + [self.bypass]:
            if not spec or any(not isinstance(w, int) or w < 1 for w in spec):
                bad("clients" if spec is not self.bypass else "bypass", f"{spec} is not a list of positive widths")
        if self.regime == "resolution":
            if len(self.factors) != len(self.clients):
                bad("factors", f"{len(self.factors)} factors for {len(self.clients)} clients")
            for f in self.factors:
                if f not in DEFAULT_FACTORS:
                    bad("factors", f"{f} not in {DEFAULT_FACTORS}")
                if self.n_features % f:
                    bad("factors", f"n_features={self.n_features} not divisible by {f}")
        if self.method in ("fedavg", "fedavg-ft") and any(c != self.clients[0] for c in self.clients):
            bad("clients", "FedAvg needs one architecture shared by every client")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:  # unresolved optional field, parsed back as its default
                continue
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, (list, int, float)):
                text = json.dumps(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of everything that shapes the run (the output directory excluded)."""
        text = self.replace(output_dir="").to_text()
        return hashlib.sha256(text.encode()).hexdigest()


_INT_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type in ("int", "int | None")}
_FLOAT_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "float"}
_BOOL_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "bool"}
_STR_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "str"}


def _parse_value(raw: str, lineno: int):
    if raw.startswith("["):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: malformed list {raw!r} ({exc.msg})") from None
    if raw in ("true", "false"):
        return raw == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def _coerce(key: str, value, lineno: int):
    def wrong(kind: str):
        raise ConfigError(f"line {lineno}: {key} expects {kind}, got {value!r}")

    if key in _BOOL_FIELDS:
        if not isinstance(value, bool):
            wrong("true/false")
    elif key in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            wrong("an integer")
    elif key in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            wrong("a number")
        value = float(value)
    elif key in _STR_FIELDS:
        if not isinstance(value, str):
            value = str(value)
    elif key == "clients":
        if not isinstance(value, list) or not all(isinstance(c, list) for c in value):
            wrong("a list of width lists")
    elif not isinstance(value, list):  # bypass, factors
        wrong("a list")
    return value


def parse_config(text: str) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key or not raw:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, _parse_value(raw, lineno), lineno)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
