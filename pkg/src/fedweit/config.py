"""Experiment configuration: INI-style ``key = value`` text with section headers.

Any field left out falls back to its default, and the fallback is logged.
Unknown sections or keys are rejected with the offending ``section.key``.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .federation.runner import FederationConfig
from .objective import METHODS, ObjectiveConfig
from .tasks import ClusterSpec

log = logging.getLogger(__name__)


class ConfigError(ValidationError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(",", " ").split())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "all", "none") else int(text)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(",", " ").split())


def _budgets(text: str) -> tuple[tuple[int, ...], ...] | None:
    rows = [r for r in text.split(";") if r.strip()]
    return tuple(_int_tuple(r) for r in rows) or None


# (section, key) -> (attribute, parser)
_SCHEMA: dict[tuple[str, str], tuple[str, Any]] = {
    ("experiment", "method"): ("method", str),
    ("experiment", "seeds"): ("seeds", _seeds),
    ("experiment", "out"): ("out", str),
    ("stream", "kind"): ("stream_kind", str),
    ("stream", "clients"): ("num_clients", int),
    ("stream", "tasks_per_client"): ("tasks_per_client", int),
    ("stream", "classes_per_task"): ("classes_per_task", int),
    ("stream", "global_tasks"): ("global_tasks", int),
    ("stream", "feature_dim"): ("feature_dim", int),
    ("stream", "sigma"): ("sigma", float),
    ("stream", "min_separation"): ("min_separation", float),
    ("stream", "n_train"): ("n_train", int),
    ("stream", "n_valid"): ("n_valid", int),
    ("stream", "n_test"): ("n_test", int),
    ("stream", "pool_scale"): ("pool_scale", int),
    ("federation", "fraction"): ("fraction", float),
    ("federation", "rounds"): ("rounds", int),
    ("federation", "epochs_per_round"): ("epochs_per_round", int),
    ("federation", "batch_size"): ("batch_size", int),
    ("federation", "kappa_b"): ("kappa_b", float),
    ("federation", "kappa_a"): ("kappa_a", float),
    ("federation", "kb_sample_size"): ("kb_sample_size", _optional_int),
    ("federation", "mode"): ("mode", str),
    ("federation", "budgets"): ("budgets", _budgets),
    ("federation", "kb_variant"): ("kb_variant", str),
    ("objective", "lambda1"): ("lambda1", float),
    ("objective", "lambda2"): ("lambda2", float),
    ("objective", "mu"): ("mu", float),
    ("objective", "lambda_ewc"): ("lambda_ewc", float),
    ("optimizer", "lr"): ("lr", float),
    ("optimizer", "rho"): ("rho", float),
    ("model", "hidden"): ("hidden", _int_tuple),
}
_KEY_OF = {attr: f"{sec}.{key}" for (sec, key), (attr, _) in _SCHEMA.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedweit"
    seeds: tuple[int, ...] = (0,)
    out: str = "results"
    stream_kind: str = "overlapped"
    num_clients: int = 5
    tasks_per_client: int = 5
    classes_per_task: int = 5
    global_tasks: int = 10
    feature_dim: int = 32
    sigma: float = 0.25
    min_separation: float = 4.0
    n_train: int = 100
    n_valid: int = 30
    n_test: int = 30
    pool_scale: int = 1
    fraction: float = 1.0
    rounds: int = 20
    epochs_per_round: int = 1
    batch_size: int = 100
    kappa_b: float = 0.3
    kappa_a: float = 0.03
    kb_sample_size: int | None = None
    mode: str = "sync"
    budgets: tuple[tuple[int, ...], ...] | None = None
    kb_variant: str = "main"
    lambda1: float = 0.1
    lambda2: float = 100.0
    mu: float = 5e-3
    lambda_ewc: float = 1.0
    lr: float = 1e-3 / 3
    rho: float = 1e-7
    hidden: tuple[int, ...] = (64,)

    def validate(self) -> ExperimentConfig:
        """Raise :class:`ConfigError` naming the first bad field."""
        checks = [
            ("method", self.method in METHODS, f"must be one of {', '.join(METHODS)}"),
            ("seeds", len(self.seeds) >= 1, "need at least one seed"),
            ("stream_kind", self.stream_kind in ("overlapped", "noniid"), "must be 'overlapped' or 'noniid'"),
            ("num_clients", self.num_clients >= 1, "must be >= 1"),
            ("tasks_per_client", self.tasks_per_client >= 1, "must be >= 1"),
            ("classes_per_task", self.classes_per_task >= 2, "must be >= 2"),
            ("global_tasks", self.stream_kind != "overlapped" or self.global_tasks >= self.tasks_per_client,
             "must be >= tasks_per_client"),
            ("pool_scale", self.pool_scale >= 1, "must be >= 1"),
            ("rho", 0 < self.rho < self.lr, "must satisfy 0 < rho < lr"),
        ]
        for attr, ok, msg in checks:
            if not ok:
                raise ConfigError(_KEY_OF[attr], msg)
        builders = [(self.objective, ("method", "lambda1", "lambda2", "mu", "lambda_ewc")),
                    (self.federation, ("fraction", "rounds", "epochs_per_round", "batch_size", "kappa_b",
                                       "kappa_a", "kb_sample_size", "mode", "budgets", "kb_variant", "hidden")),
                    (self.cluster_spec, ("feature_dim", "sigma", "min_separation", "n_train", "n_valid", "n_test"))]
        for build, attrs in builders:
            try:
                build()
            except ValidationError as exc:
                text = str(exc)
                culprit = next((a for a in attrs if a in text), attrs[0])
                raise ConfigError(_KEY_OF[culprit], text) from exc
        if self.budgets is not None:
            if len(self.budgets) != self.num_clients or any(len(r) != self.tasks_per_client for r in self.budgets):
                raise ConfigError(_KEY_OF["budgets"], "need one row per client and one entry per task")
        return self

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.method, self.lambda1, self.lambda2, self.mu, self.lambda_ewc)

    def federation(self) -> FederationConfig:
        return FederationConfig(
            fraction=self.fraction, rounds=self.rounds, epochs_per_round=self.epochs_per_round,
            batch_size=self.batch_size, kappa_b=self.kappa_b, kappa_a=self.kappa_a,
            kb_sample_size=self.kb_sample_size, mode=self.mode, budgets=self.budgets,
            kb_variant=self.kb_variant, lr=self.lr, lr_floor=self.rho, hidden=self.hidden)

    def cluster_spec(self) -> ClusterSpec:
        return ClusterSpec(self.feature_dim, self.sigma, self.n_train, self.n_valid, self.n_test,
                           self.min_separation)

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from exc
    values: dict[str, Any] = {}
    sections = {s for s, _ in _SCHEMA}
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(sec, "unknown section")
        for key, raw in cp.items(sec):
            spec = _SCHEMA.get((sec, key))
            if spec is None:
                raise ConfigError(f"{sec}.{key}", "unknown key")
            attr, parse = spec
            try:
                values[attr] = parse(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}", f"cannot parse {raw!r}") from exc
    defaults = ExperimentConfig()
    for f in fields(ExperimentConfig):
        if f.name not in values:
            log.info("%s not set, using default %r", _KEY_OF[f.name], getattr(defaults, f.name))
    return ExperimentConfig(**values).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), str(path))
