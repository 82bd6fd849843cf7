"""Deterministic accounting of bytes buffered in the transmission path.

The meter counts logical allocations only: serialization buffers, frames in
flight, and reassembly buffers.  It deliberately does not track process RSS
(whole-process numbers fold in training state and allocator behavior and are
not reproducible); ``rss_mb`` is available for side-by-side reporting but
nothing asserts on it.
"""

from __future__ import annotations

import threading


class MeterError(RuntimeError):
    """Unbalanced alloc/release."""


class MemoryMeter:
    """Thread-safe current/peak byte counter with a monotonic peak."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current_bytes = 0
        self.peak_bytes = 0

    def alloc(self, n: int) -> None:
        if n < 0:
            raise MeterError(f"negative alloc {n}")
        with self._lock:
            self.current_bytes += n
            if self.current_bytes > self.peak_bytes:
                self.peak_bytes = self.current_bytes

    def release(self, n: int) -> None:
        if n < 0:
            raise MeterError(f"negative release {n}")
        with self._lock:
            self.current_bytes -= n
            if self.current_bytes < 0:
                raise MeterError("release without matching alloc")

    def reset(self) -> None:
        with self._lock:
            self.current_bytes = 0
            self.peak_bytes = 0

    @property
    def peak_mb(self) -> float:
        return self.peak_bytes / (1 << 20)

    def __repr__(self) -> str:
        return f"MemoryMeter(current={self.current_bytes}, peak={self.peak_bytes})"


def rss_mb() -> float:
    """Process resident-set size in MiB (report-only; platform best effort)."""
    try:
        import psutil

        return psutil.Process().memory_info().rss / (1 << 20)
    except Exception:
        try:
            with open("/proc/self/status") as fh:
                for line in fh:
                    if line.startswith("VmRSS:"):
                        return int(line.split()[1]) / 1024.0
        except OSError:
            pass
    return 0.0
