"""Coefficient and target-data-size sweeps over repeated training runs.

Results go to a long-format CSV (one row per run). Rows already present with
status ``ok`` are reused, so an interrupted sweep picks up where it stopped.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .data import subsample
from .losses import Stage2Coeffs
from .model import ModelConfig
from .pipeline import Splits, Stage1Config, Stage2Config, TeacherCache, run_baseline
from .rng import Rng

log = logging.getLogger(__name__)

COEFFICIENT_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
FRACTIONS = (1.0, 0.5, 0.25, 0.10)
COEFFICIENT_FIELDS = ["axis", "value", "method", "seed", "wer", "status", "error"]
EFFICIENCY_FIELDS = ["fraction", "method", "seed", "wer", "status", "error"]


@dataclass
class SweepContext:
    """Everything a sweep needs to launch runs. ``splits(seed)`` builds the data for a seed."""

    model: ModelConfig
    stage1: Stage1Config
    stage2: Stage2Config
    splits: Callable[[int], Splits]
    setting: str = "synthetic"
    cache: TeacherCache = field(default_factory=TeacherCache)


def _read_rows(path: Optional[Path]) -> list[dict]:
    if path is None or not Path(path).exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _append_row(path: Optional[Path], fields: list, row: dict) -> None:
    if path is None:
        return
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        if new:
            w.writeheader()
        w.writerow(row)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def _run(ctx: SweepContext, method: str, seed: int, stage2: Stage2Config, fraction: float = 1.0) -> dict:
    try:
        data = ctx.splits(seed)
        if fraction < 1.0:
            data = data.with_target_train(
                subsample(data.target_train, fraction, Rng(seed).child("subsample", repr(fraction))))
        out = run_baseline(method, ctx.model, ctx.stage1, stage2, data, seed, setting=ctx.setting, cache=ctx.cache)
        return {"wer": out.record.target_test_wer, "status": "ok", "error": ""}
    except Exception as exc:  # a sweep records failures and moves on
        log.warning("sweep run %s seed=%s failed: %s", method, seed, exc)
        return {"wer": "", "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def sweep_coefficients(
    ctx: SweepContext,
    axis: str,
    values: Sequence[float] = COEFFICIENT_GRID,
    fixed_other: float = 1e-3,
    seeds: Sequence[int] = (0, 1, 2),
    results: Optional[Path] = None,
    workers: int = 1,
) -> list[dict]:
    """MSDA per (value, seed) with the other coefficient held at ``fixed_other``,
    plus FT and M2DS2 reference rows per seed."""
    if axis not in ("gamma", "delta"):
        raise ValueError(f"sweep axis must be 'gamma' or 'delta', got {axis!r}")
    if any(not v > 0 for v in values):
        raise ValueError("sweep values must be positive")
    fields, key_fields = COEFFICIENT_FIELDS, COEFFICIENT_FIELDS[:4]
    jobs = []
    for seed in seeds:
        for v in values:
            coeffs = Stage2Coeffs(gamma=v, delta=fixed_other) if axis == "gamma" else Stage2Coeffs(fixed_other, v)
            jobs.append(({"axis": axis, "value": v, "method": "MSDA", "seed": seed}, "MSDA", seed,
                         replace(ctx.stage2, coeffs=coeffs), 1.0))
        for ref in ("FT", "M2DS2"):
            jobs.append(({"axis": axis, "value": "", "method": ref, "seed": seed}, ref, seed, ctx.stage2, 1.0))
    return _execute_keyed(ctx, jobs, results, fields, key_fields, workers)


def sweep_sample_efficiency(
    ctx: SweepContext,
    fractions: Sequence[float] = FRACTIONS,
    seeds: Sequence[int] = (0, 1, 2),
    results: Optional[Path] = None,
    workers: int = 1,
) -> list[dict]:
    """MSDA and M2DS2 on subsampled target-train per fraction, plus FT reference rows."""
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    fields, key_fields = EFFICIENCY_FIELDS, EFFICIENCY_FIELDS[:3]
    jobs = []
    for seed in seeds:
        for f in fractions:
            for method in ("MSDA", "M2DS2"):
                jobs.append(({"fraction": f, "method": method, "seed": seed}, method, seed, ctx.stage2, f))
        jobs.append(({"fraction": "", "method": "FT", "seed": seed}, "FT", seed, ctx.stage2, 1.0))
    return _execute_keyed(ctx, jobs, results, fields, key_fields, workers)


def _execute_keyed(ctx, jobs, results, fields, key_fields, workers) -> list[dict]:
    done = {}
    for row in _read_rows(results):
        if row.get("status") == "ok":
            done[tuple(row[f] for f in key_fields)] = row
    rows: list = [None] * len(jobs)
    pending = []
    for i, (key, method, seed, s2, frac) in enumerate(jobs):
        ident = tuple(_fmt(key[f]) for f in key_fields)
        if ident in done:
            rows[i] = done[ident]
        else:
            pending.append((i, key, method, seed, s2, frac))
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run, ctx, m, s, s2, f) for _, _, m, s, s2, f in pending]
            outcomes = [fut.result() for fut in futures]
    else:
        outcomes = [_run(ctx, m, s, s2, f) for _, _, m, s, s2, f in pending]
    for (i, key, *_), outcome in zip(pending, outcomes):
        row = {f: _fmt(key[f]) for f in key_fields}
        row.update({"wer": _fmt(outcome["wer"]) if outcome["status"] == "ok" else "", "status": outcome["status"],
                    "error": outcome["error"]})
        _append_row(results, fields, row)
        rows[i] = row
    return rows
