"""Command-line experiment runner.

    fedweit run CONFIG [--seed N ...] [--out DIR] [--method NAME]
    fedweit compare SUMMARY.csv [SUMMARY.csv ...] [--out FILE]

The output directory is taken from ``--out``, else ``$FEDWEIT_OUT``, else the
config's ``experiment.out``.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeding
from .config import ConfigError, ExperimentConfig, load_config
from .errors import FedWeITError
from .federation import C2S, S2C, Federation, RunResult
from .metrics import avg_accuracy, dump_matrices, forgetting
from .tasks import TaskStream, gen_noniid_stream, gen_overlapped_stream

log = logging.getLogger("fedweit")

OUT_ENV = "FEDWEIT_OUT"
METRICS_COLUMNS = ("seed", "client", "task_index", "avg_accuracy", "forgetting")
SUMMARY_COLUMNS = ("method", "seeds", "accuracy_mean", "accuracy_std", "forgetting_mean", "forgetting_std",
                   "c2s_value_bytes", "s2c_value_bytes")
COMPARE_COLUMNS = ("method", "seeds", "accuracy", "forgetting", "c2s_value_bytes", "s2c_value_bytes")


def build_streams(cfg: ExperimentConfig, seed: int) -> list[TaskStream]:
    rng = seeding.derive_rng(seed, seeding.DATA)
    spec = cfg.cluster_spec()
    if cfg.stream_kind == "overlapped":
        return gen_overlapped_stream(cfg.num_clients, cfg.tasks_per_client, cfg.global_tasks, rng,
                                     classes_per_task=cfg.classes_per_task, spec=spec, pool_scale=cfg.pool_scale)
    return gen_noniid_stream(cfg.num_clients, cfg.tasks_per_client, cfg.classes_per_task, rng, spec=spec)


def run_seed(cfg: ExperimentConfig, seed: int) -> RunResult:
    streams = build_streams(cfg, seed)
    return Federation(streams, cfg.objective(), cfg.federation(), seed=seed).run()


def _fmt(v: float) -> str:
    return repr(float(v))


def metric_rows(res: RunResult) -> list[tuple]:
    """Per (client, task count) averaged accuracy and forgetting; forgetting is blank for one task."""
    rows = []
    for c in sorted(res.matrices):
        m = res.matrices[c]
        for t in range(1, m.num_tasks + 1):
            f = _fmt(forgetting(m, t)) if t >= 2 else ""
            rows.append((res.seed, c, t, _fmt(avg_accuracy(m, t)), f))
    return rows


def summarize(method: str, results: Sequence[RunResult]) -> dict:
    acc = np.array([r.avg_accuracy() for r in results])
    fgt = np.array([r.forgetting() if r.num_tasks >= 2 else np.nan for r in results])
    ddof = 1 if len(results) > 1 else 0
    return {
        "method": method,
        "seeds": len(results),
        "accuracy_mean": _fmt(acc.mean()),
        "accuracy_std": _fmt(acc.std(ddof=ddof)),
        "forgetting_mean": _fmt(fgt.mean()),
        "forgetting_std": _fmt(fgt.std(ddof=ddof)),
        "c2s_value_bytes": _fmt(np.mean([r.ledger.total(C2S) for r in results])),
        "s2c_value_bytes": _fmt(np.mean([r.ledger.total(S2C) for r in results])),
    }


def _write_csv(path: Path, header: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results, rows = [], []
    for seed in cfg.seeds:
        log.info("seed %d: %s", seed, cfg.method)
        res = run_seed(cfg, seed)
        res.ledger.to_csv(out / f"ledger_seed{seed}.csv")
        dump_matrices(res.matrices, out / f"accuracy_seed{seed}.csv", seed)
        rows.extend(metric_rows(res))
        results.append(res)
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, rows)
    summary = summarize(cfg.method, results)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [[summary[k] for k in SUMMARY_COLUMNS]])
    return out


def read_summaries(paths: Sequence[str | Path]) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                continue
            if tuple(reader.fieldnames) != SUMMARY_COLUMNS:
                raise ConfigError(str(p), f"expected columns {','.join(SUMMARY_COLUMNS)}")
            rows.extend(reader)
    return rows


def compare_rows(rows: Sequence[dict]) -> list[tuple]:
    """One row per method; several inputs for the same method are pooled by seed count."""
    if not rows:
        raise FedWeITError("no data")
    by_method: dict[str, list[dict]] = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r)
    out = []
    for method, rs in by_method.items():
        w = np.array([int(r["seeds"]) for r in rs], dtype=np.float64)

        def pooled(key):
            return _fmt(np.dot(w, [float(r[key]) for r in rs]) / w.sum())

        out.append((method, int(w.sum()), pooled("accuracy_mean"), pooled("forgetting_mean"),
                    pooled("c2s_value_bytes"), pooled("s2c_value_bytes")))
    return out


def format_table(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    buf.write(f"{'method':<12} {'seeds':>5} {'accuracy':>9} {'forgetting':>10} {'C2S bytes':>14} {'S2C bytes':>14}\n")
    for m, s, a, f, c2s, s2c in rows:
        buf.write(f"{m:<12} {s:>5} {float(a):>9.4f} {float(f):>10.4f} {float(c2s):>14.0f} {float(s2c):>14.0f}\n")
    return buf.getvalue()


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedweit", description="Federated continual learning experiments")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a configured experiment")
    r.add_argument("config")
    r.add_argument("--seed", type=int, nargs="+", help="override the seed list")
    r.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    r.add_argument("--method", help="override experiment.method")

    c = sub.add_parser("compare", help="tabulate summary CSVs")
    c.add_argument("csv", nargs="+")
    c.add_argument("--out", default="comparison.csv", help="CSV copy of the table")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            cfg = cfg.with_overrides(method=args.method,
                                     seeds=tuple(args.seed) if args.seed else None).validate()
            out = args.out or os.environ.get(OUT_ENV) or cfg.out
            run_experiment(cfg, out)
            print(out)
        else:
            rows = compare_rows(read_summaries(args.csv))
            sys.stdout.write(format_table(rows))
            _write_csv(Path(args.out), COMPARE_COLUMNS, rows)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (FedWeITError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
