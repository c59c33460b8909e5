"""Software FLOP, division and invocation counters with phase timers.

Kernels report the arithmetic they execute through :func:`add_flops`. When no
recorder is installed the calls return immediately, so instrumentation costs a
single global lookup per kernel call.

Counting convention: add = 1, multiply = 1, fused multiply-add = 2. Divisions
are tracked separately and never folded into the FLOP total.
"""

from __future__ import annotations

import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

PHASES = (
    "fetch_setup",
    "gather_global",
    "evaluate_operator",
    "local_gather",
    "pmg_solve",
    "distribute_correction",
    "scatter_global",
)

UNATTRIBUTED = "unattributed"


@dataclass
class Recorder:
    count_flops: bool = True
    flops: dict = field(default_factory=lambda: defaultdict(int))
    divisions: dict = field(default_factory=lambda: defaultdict(int))
    invocations: dict = field(default_factory=lambda: defaultdict(int))
    times: dict = field(default_factory=lambda: defaultdict(float))
    phase_calls: dict = field(default_factory=lambda: defaultdict(int))

    def __post_init__(self):
        self._lock = threading.Lock()
        self._local = threading.local()

    @property
    def current_phase(self) -> str:
        stack = getattr(self._local, "stack", None)
        return stack[-1] if stack else UNATTRIBUTED

    def _push(self, name):
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        self._local.stack.append(name)

    def _pop(self):
        self._local.stack.pop()

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def total_divisions(self) -> int:
        return sum(self.divisions.values())

    def merge(self, other: "Recorder"):
        with self._lock:
            for src, dst in ((other.flops, self.flops), (other.divisions, self.divisions),
                             (other.invocations, self.invocations), (other.times, self.times),
                             (other.phase_calls, self.phase_calls)):
                for k, v in src.items():
                    dst[k] += v


_active: Recorder | None = None


def active() -> Recorder | None:
    return _active


def add_flops(n: int, divisions: int = 0):
    rec = _active
    if rec is None or not rec.count_flops:
        return
    ph = rec.current_phase
    with rec._lock:
        rec.flops[ph] += int(n)
        if divisions:
            rec.divisions[ph] += int(divisions)


def count_call(name: str, n: int = 1):
    rec = _active
    if rec is None:
        return
    with rec._lock:
        rec.invocations[name] += n


@contextmanager
def recording(count_flops: bool = True):
    """Install a fresh :class:`Recorder` for the duration of the block."""
    global _active
    prev = _active
    rec = Recorder(count_flops=count_flops)
    _active = rec
    try:
        yield rec
    finally:
        _active = prev


# the name used by the benchmark harness
count_flops = recording


@contextmanager
def phase(name: str):
    rec = _active
    if rec is None:
        yield
        return
    rec._push(name)
    t0 = time.perf_counter()
    try:
        yield
    finally:
        dt = time.perf_counter() - t0
        rec._pop()
        with rec._lock:
            rec.times[name] += dt
            rec.phase_calls[name] += 1


@contextmanager
def suspended():
    """Temporarily disable recording, e.g. for setup work inside a timed region."""
    global _active
    prev = _active
    _active = None
    try:
        yield
    finally:
        _active = prev
