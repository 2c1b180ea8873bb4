"""Thread-scaling harness: per-category wall time, speedup and efficiency."""
from __future__ import annotations

import csv
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .cpgraph import MeshGraph
from .simulation import Scenario, load_scenario_mesh, prepare, run_scenario
from .timestepper import TIMING_CATEGORIES

CSV_HEADER = ("threads",) + TIMING_CATEGORIES + ("total", "speedup", "efficiency")


class NondeterminismError(RuntimeError):
    pass


@dataclass
class TimingRecord:
    threads: int
    iterations: int
    seconds: dict = field(default_factory=lambda: dict.fromkeys(TIMING_CATEGORIES, 0.0))

    def __post_init__(self):
        if set(self.seconds) != set(TIMING_CATEGORIES):
            raise ValueError(f"categories must be exactly {TIMING_CATEGORIES}")
        if any(v < 0 for v in self.seconds.values()):
            raise ValueError("negative timing")

    @property
    def total(self) -> float:
        return sum(self.seconds.values())

    def fractions(self) -> dict:
        tot = self.total
        if tot <= 0:
            return {k: 1.0 / len(TIMING_CATEGORIES) for k in TIMING_CATEGORIES}
        return {k: v / tot for k, v in self.seconds.items()}


@dataclass
class ScalingReport:
    records: list[TimingRecord]

    @property
    def threads(self) -> list[int]:
        return [r.threads for r in self.records]

    def speedup(self, category: Optional[str] = None) -> list[float]:
        """``T_base / T_p``; the base is the first (smallest) thread count."""
        def t(r):
            return r.total if category is None else r.seconds[category]
        base = t(self.records[0])
        return [base / t(r) if t(r) > 0 else float("inf") for r in self.records]

    def efficiency(self, category: Optional[str] = None) -> list[float]:
        p0 = self.records[0].threads
        return [s * p0 / r.threads for s, r in zip(self.speedup(category), self.records)]

    def rows(self) -> list[list]:
        out = []
        for r, s, e in zip(self.records, self.speedup(), self.efficiency()):
            out.append([r.threads] + [r.seconds[k] for k in TIMING_CATEGORIES] + [r.total, s, e])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in self.rows():
                w.writerow([row[0]] + [f"{x:.6f}" for x in row[1:]])


def _one_run(scenario: Scenario, iterations: int, mesh: Optional[MeshGraph], out_dir):
    timing = dict.fromkeys(TIMING_CATEGORIES, 0.0)
    if mesh is None:
        t0 = time.perf_counter()
        mesh = load_scenario_mesh(scenario)
        timing["mesh_loading"] = time.perf_counter() - t0
    prepared = prepare(scenario, mesh=mesh, timing=timing)
    result = run_scenario(scenario, out_dir=out_dir, prepared=prepared, n_steps=iterations)
    for k in TIMING_CATEGORIES:
        if k not in ("mesh_loading", "setup"):
            timing[k] += result.timing[k]
    return timing, result.state


def run_bench(scenario: Scenario, threads: Sequence[int], iterations: int, repetitions: int = 3,
              mesh: Optional[MeshGraph] = None, write_outputs: bool = True,
              atol: float = 1e-12) -> ScalingReport:
    """Time ``iterations`` steps for each thread count, median of ``repetitions``.

    The final state of every run is compared with the first one; a
    componentwise difference above ``atol`` raises
    :class:`NondeterminismError` and no report is produced.  Passing
    ``mesh`` skips mesh loading (its category is then zero).
    """
    threads = [int(p) for p in threads]
    if not threads or any(p < 1 for p in threads):
        raise ValueError("thread counts must be positive")
    if any(b <= a for a, b in zip(threads, threads[1:])):
        raise ValueError("thread counts must be strictly ascending")
    if iterations < 1 or repetitions < 1:
        raise ValueError("iterations and repetitions must be positive")

    saved = kernels.get_num_threads()
    reference = None
    records = []
    try:
        with tempfile.TemporaryDirectory() as tmp:
            for p in threads:
                kernels.set_num_threads(p)
                samples = []
                for rep in range(repetitions):
                    timing, state = _one_run(scenario, iterations, mesh, tmp if write_outputs else None)
                    samples.append(timing)
                    if reference is None:
                        reference = state
                        continue
                    for name in ("u", "v", "a"):
                        diff = float(np.max(np.abs(getattr(state, name) - getattr(reference, name)), initial=0.0))
                        if diff > atol:
                            raise NondeterminismError(
                                f"{name} differs by {diff:.3e} between {threads[0]} and {p} threads")
                med = {k: statistics.median(s[k] for s in samples) for k in TIMING_CATEGORIES}
                records.append(TimingRecord(p, iterations, med))
    finally:
        kernels.set_num_threads(saved)
    return ScalingReport(records)
