"""Lightweight resource accounting for training and inference phases.

A background thread samples process RSS and CPU utilization (plus CUDA peak
memory and utilization when an accelerator is present) at a fixed interval;
a run then collapses into one EfficiencyRecord per phase. On CPU-only hosts
the accelerator fields are None rather than zero so downstream tables can
tell "absent" from "idle". If sampling itself fails the record degrades to
wall-clock timing only, with a warning.
"""

from __future__ import annotations

import csv
import threading
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import psutil
import torch

BYTES_PER_GB = 1024 ** 3

EFFICIENCY_COLUMNS = [
    "phase", "accel_mem_gb", "host_mem_gb", "accel_util_pct", "cpu_util_pct",
    "minutes_per_epoch", "total_minutes",
]


@dataclass
class EfficiencyRecord:
    phase: str
    peak_accelerator_mem_gb: float | None
    peak_host_mem_gb: float
    mean_accelerator_util_pct: float | None
    mean_cpu_util_pct: float
    minutes_per_epoch: float | None
    total_minutes: float
    sample_count: int

    def validate(self) -> None:
        for name in ("peak_host_mem_gb", "mean_cpu_util_pct", "total_minutes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.minutes_per_epoch is not None and self.minutes_per_epoch < 0:
            raise ValueError("minutes_per_epoch must be non-negative")

    def csv_row(self) -> dict:
        def fmt(x):
            return "" if x is None else x
        return {
            "phase": self.phase,
            "accel_mem_gb": fmt(self.peak_accelerator_mem_gb),
            "host_mem_gb": self.peak_host_mem_gb,
            "accel_util_pct": fmt(self.mean_accelerator_util_pct),
            "cpu_util_pct": self.mean_cpu_util_pct,
            "minutes_per_epoch": fmt(self.minutes_per_epoch),
            "total_minutes": self.total_minutes,
        }


def write_efficiency_csv(path: str | Path, records: list[EfficiencyRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EFFICIENCY_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.csv_row())


class ResourceSampler:
    """Samples the current process in a daemon thread between start() and stop().

    The sampling interval bounds overhead: at the default 0.5 s a psutil
    probe costs well under a millisecond, so the watched workload runs
    essentially undisturbed.
    """

    def __init__(self, interval_s: float = 0.5):
        if interval_s <= 0:
            raise ValueError(f"interval_s must be > 0, got {interval_s}")
        self.interval_s = interval_s
        self._proc = psutil.Process()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._rss_peak = 0
        self._cpu_samples: list[float] = []
        self._degraded = False
        self._t0 = 0.0
        self._elapsed = 0.0
        self._cuda = torch.cuda.is_available()

    def _probe(self) -> None:
        try:
            rss = self._proc.memory_info().rss
            cpu = self._proc.cpu_percent(interval=None)
            with self._lock:
                self._rss_peak = max(self._rss_peak, rss)
                self._cpu_samples.append(cpu)
        except Exception as exc:
            if not self._degraded:
                warnings.warn(
                    f"resource sampling failed ({exc}); record degrades to timing only",
                    RuntimeWarning, stacklevel=2)
            self._degraded = True

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_s):
            self._probe()

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("sampler already started")
        self._stop.clear()
        self._t0 = time.perf_counter()
        if self._cuda:
            torch.cuda.reset_peak_memory_stats()
        try:
            self._proc.cpu_percent(interval=None)  # prime the cpu counter
        except Exception as exc:
            warnings.warn(
                f"resource sampling failed ({exc}); record degrades to timing only",
                RuntimeWarning, stacklevel=2)
            self._degraded = True
        self._probe()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            raise RuntimeError("sampler was never started")
        self._stop.set()
        self._thread.join()
        self._thread = None
        self._probe()  # final synchronous sample so short runs still get one
        self._elapsed = time.perf_counter() - self._t0

    def record(self, phase: str, epochs: int | None = None) -> EfficiencyRecord:
        """Collapse collected samples into one record; call after stop()."""
        minutes = self._elapsed / 60.0
        with self._lock:
            samples = list(self._cpu_samples)
            rss_peak = self._rss_peak
        if self._degraded and not samples:
            rec = EfficiencyRecord(
                phase=phase, peak_accelerator_mem_gb=None, peak_host_mem_gb=0.0,
                mean_accelerator_util_pct=None, mean_cpu_util_pct=0.0,
                minutes_per_epoch=minutes / epochs if epochs else None,
                total_minutes=minutes, sample_count=0)
            rec.validate()
            return rec
        accel_mem = None
        accel_util = None
        if self._cuda:
            accel_mem = torch.cuda.max_memory_allocated() / BYTES_PER_GB
            try:
                accel_util = float(torch.cuda.utilization())
            except Exception:
                accel_util = None
        rec = EfficiencyRecord(
            phase=phase,
            peak_accelerator_mem_gb=accel_mem,
            peak_host_mem_gb=rss_peak / BYTES_PER_GB,
            mean_accelerator_util_pct=accel_util,
            mean_cpu_util_pct=sum(samples) / len(samples) if samples else 0.0,
            minutes_per_epoch=minutes / epochs if epochs else None,
            total_minutes=minutes,
            sample_count=len(samples),
        )
        rec.validate()
        return rec


def profile(run, phase: str, interval_s: float = 0.5, epochs: int | None = None):
    """Run ``run()`` under a sampler; returns (result, EfficiencyRecord)."""
    sampler = ResourceSampler(interval_s=interval_s)
    sampler.start()
    try:
        result = run()
    finally:
        sampler.stop()
    return result, sampler.record(phase, epochs=epochs)


def training_memory_proxy(plan) -> dict:
    """Deterministic stand-in for training-memory footprint on CPU.

    fp32 gradients cost 4 bytes per trainable parameter; AdamW keeps two
    fp32 moment tensors, 8 bytes per trainable parameter. Frozen parameters
    contribute neither, which is exactly why bias-only tuning undercuts full
    fine-tuning on accelerator memory.
    """
    trainable = plan.trainable_param_count()
    total = plan.total_param_count()
    return {
        "trainable_params": trainable,
        "total_params": total,
        "added_params": plan.added_param_count,
        "gradient_bytes": 4 * trainable,
        "optimizer_state_bytes": 8 * trainable,
        "train_state_bytes": 12 * trainable,
    }
