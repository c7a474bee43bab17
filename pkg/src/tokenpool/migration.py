"""Run scenarios end to end and distill their traces into reports.

A RunResult bundles the scenario, the finished World, and the audit
trace.  Everything reported here — pool fill, auth mix, legacy
dependency, drill recovery, phase soundness — is recomputed from the
trace records, never from live actor state, so reports hold for
serialized traces too.
"""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .actors import AUTH_CHANNEL_LABELS, World, build_world
from .policy import PHASE_PERMITS, AuthMethod, MigrationPhase
from .scenario import Scenario, load_scenario
from .simnet import (
    OUTCOME_DENIED,
    OUTCOME_DROP,
    OUTCOME_SUCCESS,
    TRACE_FAULT,
    TRACE_JOB,
    TRACE_PILOT,
    TRACE_PLAN,
    TRACE_POOL,
    Trace,
)

LEGACY_METHOD_VALUES = (AuthMethod.GSI_PROXY.value, AuthMethod.LOCAL_FS.value)


@dataclass(frozen=True)
class RunResult:
    scenario: Scenario
    world: World
    trace: Trace

    @property
    def digest(self) -> str:
        return self.trace.digest()


def run_scenario(source: Scenario | str | Path, *, seed: int | None = None) -> RunResult:
    """Build the world for a scenario (or scenario file) and run it out."""
    scenario = source if isinstance(source, Scenario) else load_scenario(source)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    world = build_world(scenario)
    world.engine.run(scenario.horizon)
    return RunResult(scenario=scenario, world=world, trace=world.trace)


def parse_detail(detail: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in detail.split():
        if "=" in part:
            key, value = part.split("=", 1)
            out[key] = value
    return out


@dataclass(frozen=True)
class PoolMetrics:
    total_capacity: int
    peak_pool: int
    final_pool: int
    capacity_fraction: float
    auth_success: Mapping[str, int]
    auth_failures: Mapping[str, int]
    denied: int
    dropped: int
    legacy_dependency: Mapping[str, int]
    pilot_counts: Mapping[str, int]
    job_counts: Mapping[str, int]


def compute_metrics(result: RunResult, tail_fraction: float = 0.2) -> PoolMetrics:
    """Summarize a run.  ``capacity_fraction`` is the mean pool size over
    the final ``tail_fraction`` of the horizon divided by total slots."""
    trace = result.trace
    horizon = result.scenario.horizon
    capacity = result.scenario.total_capacity

    sizes: list[tuple[int, int]] = []
    for rec in trace.select(TRACE_POOL, outcome="SAMPLE"):
        kv = parse_detail(str(rec["detail"]))
        sizes.append((int(rec["t"]), int(kv["size"])))
    tail_start = horizon * (1.0 - tail_fraction)
    tail = [size for t, size in sizes if t >= tail_start]
    fraction = statistics.fmean(tail) / capacity if tail and capacity else 0.0

    auth_success: dict[str, int] = {}
    auth_failures: dict[str, int] = {}
    legacy: dict[str, int] = {}
    denied = 0
    dropped = 0
    for rec in trace.records:
        channel = str(rec["channel"])
        if channel not in AUTH_CHANNEL_LABELS:
            continue
        outcome = str(rec["outcome"])
        method = str(rec["method"])
        if outcome == OUTCOME_SUCCESS:
            auth_success[method] = auth_success.get(method, 0) + 1
            if method in LEGACY_METHOD_VALUES:
                legacy[channel] = legacy.get(channel, 0) + 1
        elif outcome.startswith("FAIL:"):
            reason = outcome[len("FAIL:"):]
            auth_failures[reason] = auth_failures.get(reason, 0) + 1
        elif outcome == OUTCOME_DENIED:
            denied += 1
        elif outcome == OUTCOME_DROP:
            dropped += 1

    pilot_counts: dict[str, int] = {}
    for rec in trace.select(TRACE_PILOT):
        outcome = str(rec["outcome"])
        pilot_counts[outcome] = pilot_counts.get(outcome, 0) + 1

    job_counts: dict[str, int] = {}
    for rec in trace.select(TRACE_JOB):
        outcome = str(rec["outcome"])
        if outcome == "QUEUED":
            kv = parse_detail(str(rec["detail"]))
            job_counts[outcome] = job_counts.get(outcome, 0) + int(kv.get("count", "0"))
        else:
            job_counts[outcome] = job_counts.get(outcome, 0) + 1

    return PoolMetrics(
        total_capacity=capacity,
        peak_pool=max((s for _, s in sizes), default=0),
        final_pool=sizes[-1][1] if sizes else 0,
        capacity_fraction=fraction,
        auth_success=auth_success,
        auth_failures=auth_failures,
        denied=denied,
        dropped=dropped,
        legacy_dependency=legacy,
        pilot_counts=pilot_counts,
        job_counts=job_counts,
    )


@dataclass(frozen=True)
class DrillReport:
    kid: str
    compromised_at: int
    pool_before: int
    evicted: int
    recovered_at: int | None
    recovery_time: int | None
    bound: int
    within_bound: bool


def drill_report(result: RunResult) -> DrillReport | None:
    """Reconstruct the key-compromise exercise from the trace, if one ran.

    Recovery is the instant the pool regains as many members as it lost:
    the t of the n-th join after the compromise, n = pilots evicted.
    """
    trace = result.trace
    activations = [
        rec
        for rec in trace.select(TRACE_FAULT, outcome="ACTIVATE")
        if parse_detail(str(rec["detail"])).get("kind") == "KEY_COMPROMISE"
    ]
    if not activations:
        return None
    first = activations[0]
    compromised_at = int(first["t"])
    kid = parse_detail(str(first["detail"]))["target"]

    evictions = [
        rec
        for rec in trace.select(TRACE_PILOT, outcome="EVICT")
        if parse_detail(str(rec["detail"])).get("kid") == kid
        and int(rec["t"]) >= compromised_at
    ]
    evicted = len(evictions)

    pool_before = 0
    for rec in trace.select(TRACE_POOL, outcome="SAMPLE"):
        if int(rec["t"]) >= compromised_at:
            break
        pool_before = int(parse_detail(str(rec["detail"]))["size"])

    joins_after = [
        int(rec["t"])
        for rec in trace.select(TRACE_PILOT, outcome="JOINED")
        if int(rec["t"]) >= compromised_at
    ]
    recovered_at: int | None = None
    if evicted and len(joins_after) >= evicted:
        recovered_at = joins_after[evicted - 1]
    recovery_time = None if recovered_at is None else recovered_at - compromised_at
    bound = result.scenario.drill.reprovision_delay + result.scenario.pilots.startup
    return DrillReport(
        kid=kid,
        compromised_at=compromised_at,
        pool_before=pool_before,
        evicted=evicted,
        recovered_at=recovered_at,
        recovery_time=recovery_time,
        bound=bound,
        within_bound=recovery_time is not None and recovery_time <= bound,
    )


def phase_timeline(trace: Trace) -> list[tuple[int, MigrationPhase]]:
    return [
        (int(rec["t"]), MigrationPhase(parse_detail(str(rec["detail"]))["phase"]))
        for rec in trace.select(TRACE_PLAN, outcome="PHASE")
    ]


def phase_at(timeline: list[tuple[int, MigrationPhase]], t: int) -> MigrationPhase:
    current = timeline[0][1]
    for change_t, phase in timeline:
        if change_t <= t:
            current = phase
        else:
            break
    return current


def check_phase_soundness(result: RunResult) -> list[str]:
    """Every auth attempt carrying a concrete method must use a method
    the phase in force at that instant permits.  Returns violations."""
    timeline = phase_timeline(result.trace)
    if not timeline:
        return ["no phase records in trace"]
    method_values = {m.value for m in AuthMethod}
    violations = []
    for rec in result.trace.records:
        if str(rec["channel"]) not in AUTH_CHANNEL_LABELS:
            continue
        method = str(rec["method"])
        if method not in method_values:
            continue
        phase = phase_at(timeline, int(rec["t"]))
        if AuthMethod(method) not in PHASE_PERMITS[phase]:
            violations.append(
                f"t={rec['t']} {rec['channel']} used {method} under {phase.value}"
                f" (outcome={rec['outcome']})"
            )
    return violations


def report_dict(result: RunResult) -> dict:
    metrics = compute_metrics(result)
    drill = drill_report(result)
    violations = check_phase_soundness(result)
    out = {
        "scenario": result.scenario.name,
        "seed": result.scenario.seed,
        "horizon": result.scenario.horizon,
        "digest": result.digest,
        "phase_timeline": [
            {"t": t, "phase": phase.value} for t, phase in phase_timeline(result.trace)
        ],
        "pool": {
            "capacity": metrics.total_capacity,
            "peak": metrics.peak_pool,
            "final": metrics.final_pool,
            "tail_fraction": round(metrics.capacity_fraction, 4),
        },
        "auth": {
            "success_by_method": dict(sorted(metrics.auth_success.items())),
            "failures_by_reason": dict(sorted(metrics.auth_failures.items())),
            "denied": metrics.denied,
            "dropped": metrics.dropped,
            "legacy_dependency": dict(sorted(metrics.legacy_dependency.items())),
        },
        "pilots": dict(sorted(metrics.pilot_counts.items())),
        "jobs": dict(sorted(metrics.job_counts.items())),
        "phase_soundness": {"ok": not violations, "violations": violations},
    }
    if drill is not None:
        out["drill"] = {
            "kid": drill.kid,
            "compromised_at": drill.compromised_at,
            "pool_before": drill.pool_before,
            "evicted": drill.evicted,
            "recovered_at": drill.recovered_at,
            "recovery_time": drill.recovery_time,
            "bound": drill.bound,
            "within_bound": drill.within_bound,
        }
    return out


def render_report(result: RunResult, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report_dict(result), indent=2, sort_keys=True)
    metrics = compute_metrics(result)
    drill = drill_report(result)
    violations = check_phase_soundness(result)
    lines = [
        f"run: {result.scenario.name}  seed={result.scenario.seed}  horizon={result.scenario.horizon}",
        f"digest: {result.digest}",
        "phase timeline: "
        + "  ->  ".join(
            f"{t}s {phase.value}" for t, phase in phase_timeline(result.trace)
        ),
        (
            f"pool: capacity={metrics.total_capacity} peak={metrics.peak_pool}"
            f" final={metrics.final_pool} tail_fill={metrics.capacity_fraction:.3f}"
        ),
        "auth success by method: " + _fmt_counts(metrics.auth_success),
        "auth failures by reason: " + _fmt_counts(metrics.auth_failures),
        f"denied={metrics.denied} dropped={metrics.dropped}",
        "legacy dependency by channel: " + _fmt_counts(metrics.legacy_dependency),
        "pilot events: " + _fmt_counts(metrics.pilot_counts),
        "job events: " + _fmt_counts(metrics.job_counts),
    ]
    if violations:
        lines.append(f"phase soundness: {len(violations)} violation(s)")
        lines.extend(f"  {v}" for v in violations[:5])
    else:
        lines.append("phase soundness: ok")
    if drill is not None:
        recovery = (
            f"recovered_at={drill.recovered_at} recovery_time={drill.recovery_time}s"
            if drill.recovered_at is not None
            else "not recovered"
        )
        lines.append(
            f"drill: kid={drill.kid} at={drill.compromised_at}"
            f" evicted={drill.evicted}/{drill.pool_before} {recovery}"
            f" bound={drill.bound}s within_bound={drill.within_bound}"
        )
    return "\n".join(lines) + "\n"


def _fmt_counts(counts: Mapping[str, int]) -> str:
    if not counts:
        return "none"
    return " ".join(f"{k}={v}" for k, v in sorted(counts.items()))
