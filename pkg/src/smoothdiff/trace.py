"""Convergence traces, run budgets, and the run clock."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .estimators import Objective


@dataclass(frozen=True)
class TraceRecord:
    wall_time: float
    iteration: int
    evals: int
    loss: float
    param_error: float


@dataclass
class ConvergenceTrace:
    """Per-iteration history of one optimization run.

    ``wall_time`` and ``evals`` are nondecreasing across records.  A run
    that hit non-finite state carries its partial history plus a note.
    """

    records: list[TraceRecord] = field(default_factory=list)
    aborted: bool = False
    note: str = ""

    def append(self, record: TraceRecord) -> None:
        if self.records:
            last = self.records[-1]
            if record.wall_time < last.wall_time or record.evals < last.evals:
                raise ValueError("trace records must have nondecreasing time and evals")
        self.records.append(record)


class NonFiniteStateError(RuntimeError):
    """Optimization reached non-finite parameters or derivative estimates."""

    def __init__(self, message: str, trace: ConvergenceTrace):
        super().__init__(message)
        trace.aborted = True
        trace.note = message
        self.trace = trace


@dataclass(frozen=True)
class Budget:
    """Stopping rule: wall-clock seconds, evaluation count, or both."""

    seconds: float | None = None
    evals: int | None = None

    def __post_init__(self):
        if self.seconds is None and self.evals is None:
            raise ValueError("budget needs seconds or evals")

    def exhausted(self, elapsed: float, evals: int) -> bool:
        if self.seconds is not None and elapsed >= self.seconds:
            return True
        if self.evals is not None and evals >= self.evals:
            return True
        return False


class RunClock:
    """Wall clock for a run, replaceable by a deterministic surrogate.

    In deterministic mode the "time" is the evaluation count scaled to a
    nominal microsecond per evaluation, so repeated runs produce
    byte-identical traces.
    """

    SYNTHETIC_SECONDS_PER_EVAL = 1e-6

    def __init__(self, objective: Objective, deterministic: bool = False):
        self._obj = objective
        self._det = deterministic
        self._t0 = time.perf_counter()

    def now(self) -> float:
        if self._det:
            return self._obj.eval_count * self.SYNTHETIC_SECONDS_PER_EVAL
        return time.perf_counter() - self._t0
