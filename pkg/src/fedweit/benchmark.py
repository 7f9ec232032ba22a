"""The desk-scale benchmark: 5 clients x 5 tasks x 5 classes on an overlapped synthetic stream.

Clusters are wide (sigma 0.5 on the unit sphere) so tasks are not trivially
separable, and each global task is held by several clients so the server
average mixes unrelated tasks. Learning rate, batch size and the l1 weight
are calibrated for this scale; everything else keeps its default.
"""
from __future__ import annotations

from typing import Sequence

from .cli import run_seed
from .config import ExperimentConfig
from .federation import RunResult

DESK_SCALE = ExperimentConfig(
    method="fedweit",
    seeds=(0, 1, 2),
    stream_kind="overlapped",
    num_clients=5,
    tasks_per_client=5,
    classes_per_task=5,
    global_tasks=20,
    feature_dim=32,
    sigma=0.5,
    min_separation=0.0,
    n_train=1000,
    n_valid=30,
    n_test=200,
    pool_scale=2,
    rounds=20,
    batch_size=200,
    lr=0.01,
    lambda1=1e-4,
    hidden=(64,),
)


def desk_scale(**overrides) -> ExperimentConfig:
    return DESK_SCALE.with_overrides(**overrides).validate()


def run_methods(methods: Sequence[str], seeds: Sequence[int] | None = None,
                **overrides) -> dict[str, list[RunResult]]:
    """Run every method on every seed of the desk-scale benchmark."""
    out = {}
    for method in methods:
        cfg = desk_scale(method=method, **overrides)
        out[method] = [run_seed(cfg, s) for s in (seeds if seeds is not None else cfg.seeds)]
    return out
