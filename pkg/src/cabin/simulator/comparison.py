"""Repeated-session comparison of rate controllers with normal-approximation
95% confidence intervals."""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..bayesnet import BayesianNetworkModel
from ..discretizer import _real
from .session import STRATEGIES, ScenarioConfig, run_session

DEFAULT_SCENARIOS = (4, 8, 12, 16)
DEFAULT_REPS = 5
DEFAULT_SEED = 1
METRICS = ("psnr_db", "playback_delay_ms", "throughput_kbps")
REPORT_COLUMNS = ("participants", "strategy", "metric", "mean", "ci95_lo", "ci95_hi", "reps")
Z95 = 1.959963984540054


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    ci95_lo: float | None
    ci95_hi: float | None

    @classmethod
    def of(cls, samples: Sequence[float]) -> "MetricSummary":
        x = np.asarray(samples, dtype=float)
        mean = float(x.mean())
        if x.size < 2:
            return cls(mean, None, None)
        half = Z95 * float(x.std(ddof=1)) / math.sqrt(x.size)
        return cls(mean, mean - half, mean + half)

    @property
    def width(self) -> float:
        return float("nan") if self.ci95_lo is None else self.ci95_hi - self.ci95_lo


@dataclass(frozen=True)
class ComparisonCell:
    """One (scenario, strategy) cell aggregated over its repetitions."""

    participants: int
    strategy: str
    reps: int
    samples: dict[str, tuple[float, ...]]

    def summary(self, metric: str) -> MetricSummary:
        return MetricSummary.of(self.samples[metric])

    def mean(self, metric: str) -> float:
        return self.summary(metric).mean


@dataclass(frozen=True)
class ComparisonReport:
    cells: tuple[ComparisonCell, ...]

    def cell(self, participants: int, strategy: str) -> ComparisonCell:
        for c in self.cells:
            if c.participants == participants and c.strategy == strategy:
                return c
        raise KeyError((participants, strategy))

    @property
    def scenarios(self) -> tuple[int, ...]:
        return tuple(sorted({c.participants for c in self.cells}))

    def rows(self) -> list[list]:
        out = []
        for c in self.cells:
            for metric in METRICS:
                s = c.summary(metric)
                out.append([c.participants, c.strategy, metric, _real(s.mean),
                            None if s.ci95_lo is None else _real(s.ci95_lo),
                            None if s.ci95_hi is None else _real(s.ci95_hi), c.reps])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows():
            writer.writerow(["" if v is None else (f"{v:.12g}" if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _run_cell(args) -> tuple[int, str, int, tuple[float, float, float]]:
    cfg, model, rep = args
    report = run_session(cfg, model if cfg.strategy == "cabin" else None)
    return (cfg.participants, cfg.strategy, rep,
            (report.mean_psnr_db, report.mean_playback_delay_ms, report.mean_throughput_kbps))


def run_comparison(scenarios: Sequence[int] = DEFAULT_SCENARIOS, reps: int = DEFAULT_REPS,
                   strategies: Sequence[str] = STRATEGIES, model: BayesianNetworkModel | None = None,
                   base: ScenarioConfig | None = None, seed: int = DEFAULT_SEED, jobs: int = 1) -> ComparisonReport:
    """Run every (scenario, strategy, rep) session.

    Repetition ``r`` uses seed ``seed + r`` for every scenario and strategy,
    so strategies are compared on identical traffic.  Cells are ordered by
    participants, then strategy name, then repetition regardless of ``jobs``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if reps == 1:
        warnings.warn("a single repetition leaves the confidence interval undefined", stacklevel=2)
    if "cabin" in strategies and model is None:
        raise ValueError("strategy 'cabin' needs a trained model")
    base = base or ScenarioConfig()
    tasks = [(replace(base, participants=int(p), strategy=s, seed=int(seed) + r), model, r)
             for p in sorted(set(scenarios)) for s in sorted(set(strategies)) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    results.sort(key=lambda x: (x[0], x[1], x[2]))

    cells = []
    for p in sorted(set(scenarios)):
        for s in sorted(set(strategies)):
            values = [v for (pp, ss, _, v) in results if pp == p and ss == s]
            samples = {m: tuple(float(v[i]) for v in values) for i, m in enumerate(METRICS)}
            cells.append(ComparisonCell(int(p), s, reps, samples))
    return ComparisonReport(tuple(cells))
