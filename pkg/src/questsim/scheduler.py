"""Per-sandbox VCPU scheduling: sporadic servers under rate-monotonic priority.

Every PCPU belongs to one sandbox and has its own :class:`PcpuScheduler`;
there is no global run queue. Main VCPUs carry thread jobs, I/O VCPUs carry
interrupt-handler jobs, and both behave as sporadic servers:

* each maximal stretch of foreground execution (a *chunk*) starting at
  time ``a`` and consuming ``d`` queues a replenishment of ``d`` at
  ``a + period``;
* a VCPU whose budget is exhausted may still run in background mode,
  below every foreground VCPU, without touching its budget.

Time is integer microseconds throughout.
"""

from __future__ import annotations

import bisect
import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


class SchedulerError(Exception):
    pass


class WrongPcpuOwner(SchedulerError):
    pass


class OverConsume(SchedulerError):
    pass


class Flavor(str, enum.Enum):
    MAIN = "main"
    IO = "io"


class Mode(str, enum.Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"


@dataclass(frozen=True)
class VcpuParams:
    budget: int  # C_max, µs
    period: int  # V_T, µs

    def __post_init__(self):
        if not (isinstance(self.budget, int) and isinstance(self.period, int)):
            raise TypeError("budget and period must be integer microseconds")
        if not 0 < self.budget <= self.period:
            raise ValueError(f"need 0 < budget <= period, got {self.budget}/{self.period}")

    @property
    def utilization(self) -> float:
        return self.budget / self.period


@dataclass
class Job:
    owner: str
    kind: str  # "thread" | "irq"
    arrival: int
    compute: int
    seq: int
    remaining: int = -1
    finished: int | None = None

    def __post_init__(self):
        if self.remaining < 0:
            self.remaining = self.compute

    @property
    def label(self) -> str:
        return f"{self.owner}#{self.seq}"


class Vcpu:
    def __init__(self, vcpu_id: str, flavor: Flavor, params: VcpuParams, pcpu: int, sandbox, irqs=(), background=True):
        self.id = vcpu_id
        self.background = background
        self.flavor = Flavor(flavor)
        self.params = params
        self.pcpu = pcpu
        self.sandbox = sandbox
        self.irqs = frozenset(irqs)
        self.budget_remaining = params.budget
        self.replenishments: list[tuple[int, int]] = []
        self.queue: deque[Job] = deque()
        self.activation: int | None = None  # start of the current foreground chunk
        self.chunk_used = 0
        self.busy_start: int | None = None  # used only by the defective variant

    @property
    def mode(self) -> Mode:
        return Mode.FOREGROUND if self.budget_remaining > 0 else Mode.BACKGROUND

    @property
    def runnable(self) -> bool:
        """Has work it is currently allowed to run."""
        return bool(self.queue) and (self.background or self.budget_remaining > 0)

    def pending_total(self) -> int:
        """Budget out on loan: queued replenishments plus the open chunk."""
        return sum(a for _, a in self.replenishments) + self.chunk_used

    def __repr__(self) -> str:
        return f"Vcpu({self.id}, C={self.params.budget}, T={self.params.period}, b={self.budget_remaining})"


# ---------------------------------------------------------------------------
# admission and priority

def liu_layland_bound(n: int) -> float:
    return n * (2.0 ** (1.0 / n) - 1.0)


@dataclass(frozen=True)
class AdmissionReport:
    admitted: bool
    n: int
    utilization: float
    bound: float
    pcpu: int | None = None

    def to_dict(self) -> dict:
        return {
            "admitted": self.admitted,
            "n": self.n,
            "utilization": round(self.utilization, 9),
            "bound": round(self.bound, 9),
            "pcpu": self.pcpu,
        }


def rms_admission(params: Iterable[VcpuParams], pcpu: int | None = None) -> AdmissionReport:
    params = list(params)
    n = len(params)
    if n == 0:
        return AdmissionReport(True, 0, 0.0, 1.0, pcpu)
    u = math.fsum(p.budget / p.period for p in params)
    bound = liu_layland_bound(n)
    return AdmissionReport(u <= bound, n, u, bound, pcpu)


def admit(sandbox, params: VcpuParams, pcpu: "PcpuScheduler") -> AdmissionReport:
    """Liu-Layland test for adding ``params`` to ``pcpu``'s existing VCPUs."""
    if pcpu.sandbox != sandbox:
        raise WrongPcpuOwner(f"PCPU {pcpu.id} belongs to sandbox {pcpu.sandbox}, not {sandbox}")
    return rms_admission([v.params for v in pcpu.vcpus] + [params], pcpu.id)


def _priority_key(v: Vcpu):
    return (v.mode is Mode.BACKGROUND, v.params.period, v.id)


def rms_priority(vcpus: Iterable[Vcpu]) -> list[Vcpu]:
    """Highest priority first: foreground before background, then shorter period, then id."""
    return sorted(vcpus, key=_priority_key)


# ---------------------------------------------------------------------------
# the per-PCPU scheduler

MONITOR = "monitor"


class PcpuScheduler:
    """Event-driven sporadic-server scheduler for one PCPU.

    Callers must :meth:`run_until` the current time before mutating state
    (enqueueing work, stalling for a monitor), then the scheduler re-decides
    immediately. ``chunked=False`` gives the defective variant in which all
    consumption during a backlogged stretch is replenished relative to the
    first activation of that stretch; it exists as a negative control.
    """

    def __init__(
        self,
        pcpu_id: int,
        sandbox,
        *,
        chunked: bool = True,
        check: bool = False,
        on_segment: Callable[[dict], None] | None = None,
        on_job_done: Callable[[Vcpu, Job], None] | None = None,
    ):
        self.id = pcpu_id
        self.sandbox = sandbox
        self.chunked = chunked
        self.check = check
        self.vcpus: list[Vcpu] = []
        self.now = 0
        self.running: Vcpu | None = None
        self.running_fg = False
        self.stall_until = 0
        self._seg: tuple | None = None  # (start, vcpu_id, job_label, fg)
        self.segments: list[dict] = []
        self._on_segment = on_segment or self.segments.append
        self._on_job_done = on_job_done

    # -- setup --------------------------------------------------------------

    def add_vcpu(self, vcpu: Vcpu) -> Vcpu:
        if vcpu.pcpu != self.id:
            raise SchedulerError(f"{vcpu.id} is bound to PCPU {vcpu.pcpu}, not {self.id}")
        if vcpu.sandbox != self.sandbox:
            raise WrongPcpuOwner(f"{vcpu.id} of sandbox {vcpu.sandbox} on PCPU owned by {self.sandbox}")
        self.vcpus.append(vcpu)
        return vcpu

    # -- external inputs ----------------------------------------------------

    def enqueue(self, vcpu: Vcpu, job: Job, now: int) -> None:
        self._sync(now)
        vcpu.queue.append(job)
        self._settle()

    def stall(self, now: int, duration: int) -> str | None:
        """Occupy the PCPU with monitor code for ``duration`` µs; returns the preempted VCPU id."""
        self._sync(now)
        charged = self.running.id if self.running is not None else None
        if duration > 0:
            self.stall_until = max(self.stall_until, now) + duration
            self._settle()
        return charged

    def _sync(self, now: int) -> None:
        if now != self.now:
            self.run_until(now)

    # -- time advance -------------------------------------------------------

    def next_decision(self) -> float:
        t = math.inf
        if self.stall_until > self.now:
            t = self.stall_until
        for v in self.vcpus:
            if v.replenishments:
                t = min(t, v.replenishments[0][0])
        v = self.running
        if v is not None and self.stall_until <= self.now:
            t = min(t, self.now + v.queue[0].remaining)
            if self.running_fg:
                t = min(t, self.now + v.budget_remaining)
        return t

    def run_until(self, t: int) -> None:
        if t < self.now:
            raise SchedulerError(f"PCPU {self.id}: time going backwards ({t} < {self.now})")
        while True:
            nxt = self.next_decision()
            if nxt > t:
                break
            self._advance(int(nxt))
            self._settle()
        self._advance(t)

    def finish(self, t: int) -> None:
        self.run_until(t)
        self._close_segment()

    def _advance(self, t: int) -> None:
        dt = t - self.now
        v = self.running
        if dt > 0 and v is not None and self.stall_until <= self.now:
            job = v.queue[0]
            job.remaining -= dt
            if job.remaining < 0:
                raise SchedulerError(f"{job.label} overran")
            if self.running_fg:
                if dt > v.budget_remaining:
                    raise OverConsume(f"{v.id} consumed {dt} with {v.budget_remaining} left")
                v.budget_remaining -= dt
                v.chunk_used += dt
        self.now = t

    # -- decisions ----------------------------------------------------------

    def _settle(self) -> None:
        while True:
            self._retire()
            self._apply_due()
            self._switch(self._pick())
            if not any(v.replenishments and v.replenishments[0][0] <= self.now for v in self.vcpus):
                break
        if self.check:
            self.check_invariants()

    def _retire(self) -> None:
        v = self.running
        if v is None or not v.queue or v.queue[0].remaining:
            return
        job = v.queue.popleft()
        job.finished = self.now
        if not v.queue and not self.running_fg:
            v.busy_start = None
        if self._on_job_done is not None:
            self._on_job_done(v, job)

    def _apply_due(self) -> None:
        for v in self.vcpus:
            while v.replenishments and v.replenishments[0][0] <= self.now:
                _, amount = v.replenishments.pop(0)
                v.budget_remaining += amount
                if v.budget_remaining > v.params.budget:
                    raise SchedulerError(f"{v.id}: budget {v.budget_remaining} exceeds C_max")

    def _pick(self):
        if self.stall_until > self.now:
            return MONITOR
        ready = [v for v in self.vcpus if v.runnable]
        if not ready:
            return None
        best = min(ready, key=_priority_key)
        return best, best.mode is Mode.FOREGROUND

    def _switch(self, sel) -> None:
        if sel is MONITOR or sel is None:
            new_v, new_fg = None, False
        else:
            new_v, new_fg = sel
        old_v, old_fg = self.running, self.running_fg
        if old_v is not None and old_fg and (new_v is not old_v or not new_fg):
            self._end_chunk(old_v)
        if new_v is not None and new_fg and (new_v is not old_v or not old_fg):
            new_v.activation = self.now
            if new_v.busy_start is None:
                new_v.busy_start = self.now
        self.running, self.running_fg = new_v, new_fg

        if sel is MONITOR:
            label = (None, MONITOR, False)
        elif new_v is None:
            label = None
        else:
            label = (new_v.id, new_v.queue[0].label, new_fg)
        cur = self._seg[1:] if self._seg is not None else None
        if label != cur:
            self._close_segment()
            if label is not None:
                self._seg = (self.now,) + label

    def _end_chunk(self, v: Vcpu) -> None:
        if v.chunk_used:
            base = v.activation if self.chunked else v.busy_start
            bisect.insort(v.replenishments, (base + v.params.period, v.chunk_used))
        if not v.queue:
            v.busy_start = None
        v.chunk_used = 0
        v.activation = None

    def _close_segment(self) -> None:
        if self._seg is None:
            return
        start, vid, job, fg = self._seg
        self._seg = None
        if self.now > start:
            self._on_segment(
                {
                    "time_start": start,
                    "time_end": self.now,
                    "pcpu": self.id,
                    "sandbox": self.sandbox,
                    "vcpu": vid,
                    "job": job,
                    "foreground": fg,
                }
            )

    # -- debugging ----------------------------------------------------------

    def check_invariants(self) -> None:
        for v in self.vcpus:
            assert 0 <= v.budget_remaining <= v.params.budget, v
            assert v.budget_remaining + v.pending_total() == v.params.budget, (
                f"{v.id}: conservation broken ({v.budget_remaining} + {v.pending_total()} != {v.params.budget})"
            )
        if self.stall_until > self.now:
            assert self.running is None
            return
        ready = [v for v in self.vcpus if v.runnable]
        if not ready:
            assert self.running is None
            return
        best = min(ready, key=_priority_key)
        assert self.running is best, f"PCPU {self.id}: running {self.running}, should be {best}"
        assert self.running_fg == (best.budget_remaining > 0)


# ---------------------------------------------------------------------------
# trace audits

def _segments_of(trace_or_records) -> list[dict]:
    if hasattr(trace_or_records, "records"):
        return trace_or_records.records["schedule"]
    return list(trace_or_records)


def foreground_profile(segments: Iterable[dict], vcpu_id: str, end: int) -> np.ndarray:
    """Per-µs 0/1 array of foreground execution of ``vcpu_id`` over ``[0, end)``."""
    fg = np.zeros(max(end, 0), dtype=np.int8)
    for s in segments:
        if s["vcpu"] == vcpu_id and _truthy(s["foreground"]):
            fg[int(s["time_start"]):int(s["time_end"])] = 1
    return fg


def _truthy(x) -> bool:
    if isinstance(x, str):
        return x.lower() in ("1", "true", "yes")
    return bool(x)


@dataclass(frozen=True)
class WindowReport:
    vcpu: str
    passed: bool
    budget: int
    period: int
    max_window: int
    worst_start: int | None

    def to_dict(self) -> dict:
        return {
            "vcpu": self.vcpu,
            "passed": self.passed,
            "budget": self.budget,
            "period": self.period,
            "max_window": self.max_window,
            "worst_start": self.worst_start,
        }


def window_sums(segments: Iterable[dict], vcpu_id: str, period: int, end: int) -> np.ndarray:
    """Foreground µs in every window ``[s, s + period)`` for s = 0, 1, ... end - period."""
    prof = foreground_profile(segments, vcpu_id, end)
    cs = np.concatenate(([0], np.cumsum(prof, dtype=np.int64)))
    if end <= period:
        return cs[-1:].copy()
    return cs[period:] - cs[:-period]


def window_check(trace, vcpu_id: str, budget: int | None = None, period: int | None = None, end: int | None = None) -> WindowReport:
    """Slide a ``period``-long window over the run in 1µs steps; pass iff no window exceeds ``budget``."""
    if budget is None or period is None or end is None:
        meta = trace.meta
        info = meta["vcpus"][vcpu_id]
        budget = info["budget_us"] if budget is None else budget
        period = info["period_us"] if period is None else period
        end = meta["until_us"] if end is None else end
    sums = window_sums(_segments_of(trace), vcpu_id, period, end)
    worst = int(sums.argmax()) if sums.size else None
    mx = int(sums.max()) if sums.size else 0
    return WindowReport(vcpu_id, mx <= budget, budget, period, mx, worst)


def aligned_service(trace, vcpu_id: str, period: int | None = None, end: int | None = None, origin: int | None = None) -> list[int]:
    """Foreground µs received in each complete window ``[origin + kT, origin + (k+1)T)``.

    ``origin`` defaults to the VCPU's first foreground instant.
    """
    segments = _segments_of(trace)
    if period is None or end is None:
        meta = trace.meta
        period = meta["vcpus"][vcpu_id]["period_us"] if period is None else period
        end = meta["until_us"] if end is None else end
    mine = [s for s in segments if s["vcpu"] == vcpu_id and _truthy(s["foreground"])]
    if not mine:
        return []
    if origin is None:
        origin = min(int(s["time_start"]) for s in mine)
    prof = foreground_profile(mine, vcpu_id, end)
    cs = np.concatenate(([0], np.cumsum(prof, dtype=np.int64)))
    starts = range(origin, end - period + 1, period)
    return [int(cs[s + period] - cs[s]) for s in starts]
