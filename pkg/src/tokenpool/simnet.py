"""Seeded discrete-event core: clock, RNG streams, audit trace, faults.

Determinism contract: with the same scenario and seed the engine pops
events in identical order (ties break on insertion sequence), every
random draw comes from a label-isolated substream, and the audit trace
serializes to byte-identical JSONL whose SHA-256 is the run digest.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .errors import SimulationError, UnknownTarget


class Engine:
    """Minimal event loop: integer-friendly clock, FIFO tie-breaking."""

    def __init__(self) -> None:
        self.now: int = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []

    def schedule_at(self, t: int, action: Callable[[], None]) -> None:
        if t < self.now:
            raise SimulationError(f"cannot schedule at {t}, clock is at {self.now}")
        heapq.heappush(self._heap, (t, self._seq, action))
        self._seq += 1

    def schedule(self, delay: int, action: Callable[[], None]) -> None:
        self.schedule_at(self.now + delay, action)

    def run(self, until: int) -> None:
        """Pop events up to and including ``until``, then park the clock there."""
        while self._heap and self._heap[0][0] <= until:
            t, _, action = heapq.heappop(self._heap)
            self.now = t
            action()
        self.now = until


class RngStreams:
    """Per-label random substreams derived from one run seed.

    Each label gets its own generator seeded from SHA-256(seed/label),
    so adding draws under one label never shifts any other label's
    sequence.
    """

    def __init__(self, seed: int | str) -> None:
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, label: str) -> random.Random:
        if label not in self._streams:
            material = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
            self._streams[label] = random.Random(int.from_bytes(material[:8], "big"))
        return self._streams[label]


#: Non-auth record groups share the channel column with auth channels.
TRACE_PILOT = "PILOT"
TRACE_JOB = "JOB"
TRACE_FAULT = "FAULT"
TRACE_PLAN = "PLAN"
TRACE_POOL = "POOL"

OUTCOME_SUCCESS = "SUCCESS"
OUTCOME_DENIED = "DENIED"
OUTCOME_DROP = "DROP"


def fail_outcome(reason: str) -> str:
    return f"FAIL:{reason}"


class Trace:
    """Append-only audit log; JSONL rendering defines the run digest."""

    def __init__(self) -> None:
        self.records: list[dict[str, object]] = []

    def record(
        self,
        t: int | float,
        channel: str,
        outcome: str,
        *,
        method: str = "-",
        identity: str = "-",
        detail: str = "",
    ) -> None:
        if isinstance(t, float) and t.is_integer():
            t = int(t)
        self.records.append(
            {
                "t": t,
                "channel": channel,
                "method": method,
                "outcome": outcome,
                "identity": identity,
                "detail": detail,
            }
        )

    def select(
        self,
        channel: str | None = None,
        outcome: str | None = None,
        outcome_prefix: str | None = None,
    ) -> list[dict[str, object]]:
        out = []
        for rec in self.records:
            if channel is not None and rec["channel"] != channel:
                continue
            if outcome is not None and rec["outcome"] != outcome:
                continue
            if outcome_prefix is not None and not str(rec["outcome"]).startswith(
                outcome_prefix
            ):
                continue
            out.append(rec)
        return out

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(rec, sort_keys=True, separators=(",", ":"))
            for rec in self.records
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


class FaultKind(enum.Enum):
    CE_TOKEN_MISCONFIG = "CE_TOKEN_MISCONFIG"
    KEY_COMPROMISE = "KEY_COMPROMISE"
    MESSAGE_DROP = "MESSAGE_DROP"
    CE_STUCK_SUBMISSION = "CE_STUCK_SUBMISSION"


@dataclass(frozen=True)
class Fault:
    """One injected fault: what, where, and over which time window.

    ``target`` names a gateway id, a key id, or a channel label
    depending on the kind; ``"*"`` matches everything.  ``end=None``
    leaves the fault active for the rest of the run.  ``rate`` only
    matters for MESSAGE_DROP.
    """

    kind: FaultKind
    target: str
    start: int = 0
    end: int | None = None
    rate: float = 1.0


@dataclass
class FaultBoard:
    faults: list[Fault] = field(default_factory=list)

    def inject(
        self,
        fault: Fault,
        *,
        known_targets: Iterable[str],
        trace: Trace,
        engine: Engine,
        on_activate: Callable[[Fault], None] | None = None,
    ) -> None:
        """Register a fault, record INJECT now and ACTIVATE at its start.

        Raises:
            UnknownTarget: the target names nothing in this world.
        """
        if fault.target != "*" and fault.target not in set(known_targets):
            raise UnknownTarget(
                f"fault target {fault.target!r} names nothing in this run"
            )
        self.faults.append(fault)
        trace.record(
            engine.now,
            TRACE_FAULT,
            "INJECT",
            detail=_fault_detail(fault),
        )

        def _activate() -> None:
            trace.record(fault.start, TRACE_FAULT, "ACTIVATE", detail=_fault_detail(fault))
            if on_activate is not None:
                on_activate(fault)

        engine.schedule_at(fault.start, _activate)

    def active(self, kind: FaultKind, target: str, t: int) -> Fault | None:
        for fault in self.faults:
            if fault.kind is not kind:
                continue
            if fault.target != "*" and fault.target != target:
                continue
            if t < fault.start:
                continue
            if fault.end is not None and t >= fault.end:
                continue
            return fault
        return None


def _fault_detail(fault: Fault) -> str:
    parts = [f"kind={fault.kind.value}", f"target={fault.target}", f"start={fault.start}"]
    if fault.end is not None:
        parts.append(f"end={fault.end}")
    if fault.kind is FaultKind.MESSAGE_DROP:
        parts.append(f"rate={fault.rate}")
    return " ".join(parts)


def message_dropped(
    board: FaultBoard, streams: RngStreams, channel_label: str, t: int
) -> bool:
    """Draw a drop decision for one message on one channel.

    Draws come from a dedicated substream so a zero-rate fault (which
    never draws) leaves every other stream, and hence the digest,
    untouched.
    """
    fault = board.active(FaultKind.MESSAGE_DROP, channel_label, t)
    if fault is None or fault.rate <= 0.0:
        return False
    return streams.stream("faults/drop").random() < fault.rate
