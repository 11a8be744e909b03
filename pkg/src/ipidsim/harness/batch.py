"""Seeded batches of scenario runs and their aggregate statistics."""

from __future__ import annotations

import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Optional

from .config import ScenarioConfig
from .scenario import run_scenario


def _one(args) -> dict:
    cfg, seed, phase = args
    return run_scenario(cfg, seed=seed, phase=phase).summary


def _percentile(values: list[float], q: float) -> Optional[float]:
    if not values:
        return None
    ordered = sorted(values)
    pos = (len(ordered) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


def aggregate(summaries: list[dict]) -> dict:
    """Fold per-run summaries (in run order) into batch statistics."""
    runs = len(summaries)
    ok = [s for s in summaries if s["outcome"] == "Success"]
    times = [s["total_virtual_ms"] for s in ok]
    phase_times: dict[str, list[int]] = {}
    for s in ok:
        for p in s["phases"]:
            phase_times.setdefault(p["name"], []).append(p["virtual_ms"])
    reasons = Counter(f"{s['failure_phase']}:{s['failure_reason']}" for s in summaries if s["outcome"] != "Success")
    return {
        "runs": runs,
        "successes": len(ok),
        "success_rate": len(ok) / runs if runs else 0.0,
        "mean_virtual_ms": statistics.fmean(times) if times else None,
        "p50_virtual_ms": _percentile(times, 0.5),
        "p90_virtual_ms": _percentile(times, 0.9),
        "max_virtual_ms": max(times) if times else None,
        "phase_mean_ms": {name: statistics.fmean(v) for name, v in phase_times.items()},
        "failures": dict(sorted(reasons.items())),
        "seeds": [s["seed"] for s in summaries],
    }


def run_batch(
    cfg: ScenarioConfig,
    n_runs: int,
    seed_stride: int = 1,
    phase: Optional[str] = None,
    workers: int = 1,
    on_result: Optional[Callable[[int, dict], None]] = None,
) -> dict:
    """Run ``n_runs`` scenarios with seeds ``cfg.seed + i * seed_stride``."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    jobs = [(cfg, cfg.seed + i * seed_stride, phase) for i in range(n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            summaries = list(pool.map(_one, jobs))
        if on_result is not None:
            for i, s in enumerate(summaries):
                on_result(i, s)
    else:
        summaries = []
        for i, job in enumerate(jobs):
            s = _one(job)
            summaries.append(s)
            if on_result is not None:
                on_result(i, s)
    out = aggregate(summaries)
    out["runs_detail"] = summaries
    return out
