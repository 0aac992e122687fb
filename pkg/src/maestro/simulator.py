"""Discrete-event simulation of one training iteration over the section graph.

Resources are (section, dp_rank) pairs executing fixed stage sequences derived
from the schedule (the same sequence semantics as the scheduler's 3-resource
model, so with zero communication cost the two agree exactly).  Optional
communication latency is pure edge latency: transfers overlap with compute and
never occupy a resource, they only delay the consumer stage's readiness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

from .errors import DependencyDeadlock, InconsistentSchedule
from .scheduling import ExecPolicy, Schedule
from .workload import SampleTiming, SectionConfig, SectionGraph, SectionId, Side

CommModel = Callable[[float], float]

PHASE_ORDER = ("f_bc", "f_c", "f_ac", "b_bc", "b_c", "b_ac")
FORWARD_PHASES = {"f_bc", "f_c", "f_ac"}


@dataclass(frozen=True)
class StageEvent:
    section: SectionId
    dp_rank: int
    sample_id: int
    phase: str
    start: float
    end: float


@dataclass(frozen=True)
class CommEvent:
    route: str
    sample_id: int
    bytes: float
    start: float
    end: float


@dataclass(frozen=True)
class ResourceStats:
    busy: float
    first_start: float
    last_end: float

    @property
    def span(self) -> float:
        return self.last_end - self.first_start


@dataclass(frozen=True)
class IterationReport:
    makespan: float
    per_section_busy_time: Mapping[SectionId, float]
    per_section_idle_time: Mapping[SectionId, float]
    per_resource: Mapping[tuple[SectionId, int], ResourceStats]
    critical_idle: float
    critical_idle_per_rank: Mapping[int, float]
    comm_events: tuple[CommEvent, ...]


def _phase_owner(
    phase: str,
    critical: SectionId,
    upstream: Optional[SectionId],
    downstream: Optional[SectionId],
) -> Optional[SectionId]:
    if phase in ("f_c", "b_c"):
        return critical
    if phase in ("f_bc", "b_ac"):
        return upstream
    return downstream


def _path_bytes(graph: SectionGraph, aux: SectionId) -> float:
    """Total edge payload along the auxiliary's path to the critical section."""
    total = 0.0
    node = aux
    while graph.side(node) is not Side.CRITICAL:
        nxt = graph.neighbor_toward_critical(node)
        edge = graph.edge_between(node, nxt)
        if edge is not None:
            total += edge.payload_bytes_per_sample
        node = nxt
    return total


@dataclass
class _Stage:
    sample_id: int
    phase: str
    duration: float
    ready_after: Optional[tuple[int, str]]  # chain predecessor, if any
    comm_bytes: float  # payload crossing into this stage (0 if same section)
    comm_route: str


def _chain_stages(
    graph: SectionGraph,
    sample: SampleTiming,
    critical: SectionId,
) -> list[tuple[str, SectionId]]:
    """Nonzero phases of the sample in chain order with their owning sections."""
    upstream, downstream = graph.resolve_activation(sample)
    out: list[tuple[str, SectionId]] = []
    for phase in PHASE_ORDER:
        dur = getattr(sample, f"t_{phase}")
        if dur <= 0:
            continue
        owner = _phase_owner(phase, critical, upstream, downstream)
        if owner is None:
            raise InconsistentSchedule(
                f"sample {sample.sample_id} spends time in phase {phase} but activates "
                "no section on that side",
                sample=sample.sample_id,
            )
        out.append((phase, owner))
    return out


def simulate(
    graph: SectionGraph,
    configs: Mapping[SectionId, SectionConfig],
    schedule: Schedule,
    comm_model: Optional[CommModel] = None,
    aux_execution: str = "merged",
) -> tuple[IterationReport, list[StageEvent]]:
    """Run one iteration and return the report plus the full event list.

    aux_execution selects how auxiliary resources pick work: "merged" follows
    the fan-out-merged schedule order strictly (default); "earliest-ready"
    lets an auxiliary run any of its pending stages whose input is available.
    """
    if aux_execution not in ("merged", "earliest-ready"):
        raise ValueError(f"unknown aux_execution mode '{aux_execution}'")
    policy = schedule.policy
    critical = graph.critical.id
    samples = {s.sample_id: s for s in schedule.batch}

    chains: dict[int, list[tuple[str, SectionId]]] = {
        sid: _chain_stages(graph, s, critical) for sid, s in samples.items()
    }

    # Where each (sample, phase) runs: the unique schedule rank of the owner
    # section whose order contains the sample.
    rank_of: dict[tuple[int, SectionId], int] = {}
    for (section, rank), order in schedule.per_rank_orders.items():
        if section not in graph.section_ids:
            raise InconsistentSchedule(f"schedule names unknown section '{section}'", section=section)
        dp = configs[section].dp
        if not 0 <= rank < dp:
            raise InconsistentSchedule(
                f"schedule rank {rank} out of range for section '{section}' (dp={dp})",
                section=section,
            )
        for sid in order:
            if sid not in samples:
                raise InconsistentSchedule(f"schedule references unknown sample {sid}")
            key = (sid, section)
            if key in rank_of:
                raise InconsistentSchedule(
                    f"sample {sid} appears on two ranks of section '{section}'",
                    section=section,
                )
            rank_of[key] = rank
    for sid, chain in chains.items():
        for phase, owner in chain:
            if (sid, owner) not in rank_of:
                raise InconsistentSchedule(
                    f"sample {sid} needs section '{owner}' but no rank order contains it",
                    section=owner,
                )

    # Fixed stage sequence per resource, in schedule order and policy interleave.
    queues: dict[tuple[SectionId, int], list[_Stage]] = {}
    path_cache: dict[SectionId, float] = {}

    def stage_for(sid: int, phase: str) -> _Stage:
        sample = samples[sid]
        chain = chains[sid]
        idx = next(i for i, (p, _) in enumerate(chain) if p == phase)
        prev = chain[idx - 1] if idx > 0 else None
        comm_bytes = 0.0
        route = ""
        ready_after = None
        if prev is not None:
            prev_phase, prev_owner = prev
            owner = chain[idx][1]
            ready_after = (sid, prev_phase)
            if prev_owner != owner:
                aux = prev_owner if prev_owner != critical else owner
                if aux not in path_cache:
                    path_cache[aux] = _path_bytes(graph, aux)
                comm_bytes = path_cache[aux]
                route = f"{prev_owner}->{owner}"
        return _Stage(sid, phase, getattr(sample, f"t_{phase}"), ready_after, comm_bytes, route)

    for (section, rank), order in sorted(schedule.per_rank_orders.items()):
        side = graph.side(section)
        seq: list[_Stage] = []
        present = {
            sid: {p for p, owner in chains[sid] if owner == section} for sid in order
        }
        for sid in order:
            extra = present[sid] - (
                {"f_c", "b_c"} if side is Side.CRITICAL
                else {"f_bc", "b_ac"} if side is Side.UPSTREAM
                else {"f_ac", "b_bc"}
            )
            if extra:
                raise InconsistentSchedule(
                    f"sample {sid} owns phases {sorted(extra)} outside section '{section}'",
                    section=section,
                )
        if side is Side.UPSTREAM:
            seq += [stage_for(sid, "f_bc") for sid in order if "f_bc" in present[sid]]
            seq += [stage_for(sid, "b_ac") for sid in order if "b_ac" in present[sid]]
        else:
            fwd, bwd = ("f_c", "b_c") if side is Side.CRITICAL else ("f_ac", "b_bc")
            if policy is ExecPolicy.INTERLEAVED:
                for sid in order:
                    if fwd in present[sid]:
                        seq.append(stage_for(sid, fwd))
                    if bwd in present[sid]:
                        seq.append(stage_for(sid, bwd))
            else:
                seq += [stage_for(sid, fwd) for sid in order if fwd in present[sid]]
                seq += [stage_for(sid, bwd) for sid in order if bwd in present[sid]]
        queues[(section, rank)] = seq

    # Event loop: repeatedly run the startable stage with the earliest start.
    finish: dict[tuple[int, str], float] = {}
    clock: dict[tuple[SectionId, int], float] = {res: 0.0 for res in queues}
    head: dict[tuple[SectionId, int], int] = {res: 0 for res in queues}
    done_in: dict[tuple[SectionId, int], set[int]] = {res: set() for res in queues}
    events: list[StageEvent] = []
    total = sum(len(q) for q in queues.values())
    executed = 0

    def ready_time(stage: _Stage) -> Optional[float]:
        if stage.ready_after is None:
            return 0.0
        t = finish.get(stage.ready_after)
        if t is None:
            return None
        if comm_model is not None and stage.comm_bytes >= 0 and stage.comm_route:
            return t + comm_model(stage.comm_bytes)
        return t

    def candidates(res: tuple[SectionId, int]) -> list[tuple[int, _Stage]]:
        queue = queues[res]
        if aux_execution == "merged" or graph.side(res[0]) is Side.CRITICAL:
            i = head[res]
            return [(i, queue[i])] if i < len(queue) else []
        return [(i, s) for i, s in enumerate(queue) if i not in done_in[res]]

    while executed < total:
        best: Optional[tuple[float, SectionId, int, int]] = None
        best_res: Optional[tuple[SectionId, int]] = None
        best_stage: Optional[_Stage] = None
        for res in sorted(queues):
            for idx, stage in candidates(res):
                ready = ready_time(stage)
                if ready is None:
                    continue
                start = max(clock[res], ready)
                key = (start, res[0], res[1], idx)
                if best is None or key < best:
                    best, best_res, best_stage = key, res, stage
                    best_idx = idx
        if best is None:
            blocked = sorted(res for res in queues if head[res] < len(queues[res]))
            raise DependencyDeadlock(
                f"no startable stage; blocked resources: {blocked}", resources=tuple(map(str, blocked))
            )
        start = best[0]
        end = start + best_stage.duration
        section, rank = best_res
        events.append(StageEvent(section, rank, best_stage.sample_id, best_stage.phase, start, end))
        finish[(best_stage.sample_id, best_stage.phase)] = end
        clock[best_res] = end
        done_in[best_res].add(best_idx)
        while head[best_res] < len(queues[best_res]) and head[best_res] in done_in[best_res]:
            head[best_res] += 1
        executed += 1

    events.sort(key=lambda e: (e.start, e.section, e.dp_rank, e.sample_id, e.phase))
    makespan = max((e.end for e in events), default=0.0)

    per_resource: dict[tuple[SectionId, int], ResourceStats] = {}
    for res in queues:
        res_events = [e for e in events if (e.section, e.dp_rank) == res]
        if res_events:
            per_resource[res] = ResourceStats(
                busy=sum(e.end - e.start for e in res_events),
                first_start=min(e.start for e in res_events),
                last_end=max(e.end for e in res_events),
            )
        else:
            per_resource[res] = ResourceStats(0.0, 0.0, 0.0)

    busy_by_section: dict[SectionId, float] = {}
    idle_by_section: dict[SectionId, float] = {}
    for (section, _rank), stats in sorted(per_resource.items()):
        busy_by_section[section] = busy_by_section.get(section, 0.0) + stats.busy
        idle_by_section[section] = idle_by_section.get(section, 0.0) + (makespan - stats.busy)

    crit_idle_per_rank: dict[int, float] = {}
    for (section, rank), stats in sorted(per_resource.items()):
        if section == critical:
            crit_idle_per_rank[rank] = stats.span - stats.busy

    comm_events: list[CommEvent] = []
    if comm_model is not None:
        for sid in sorted(chains):
            chain = chains[sid]
            for i in range(1, len(chain)):
                phase, owner = chain[i]
                prev_phase, prev_owner = chain[i - 1]
                if prev_owner == owner:
                    continue
                aux = prev_owner if prev_owner != critical else owner
                bytes_ = path_cache.get(aux, _path_bytes(graph, aux))
                start = finish[(sid, prev_phase)]
                comm_events.append(
                    CommEvent(f"{prev_owner}->{owner}", sid, bytes_, start, start + comm_model(bytes_))
                )
        comm_events.sort(key=lambda c: (c.start, c.route, c.sample_id))

    report = IterationReport(
        makespan=makespan,
        per_section_busy_time=busy_by_section,
        per_section_idle_time=idle_by_section,
        per_resource=per_resource,
        critical_idle=sum(crit_idle_per_rank.values()),
        critical_idle_per_rank=crit_idle_per_rank,
        comm_events=tuple(comm_events),
    )
    return report, events


# --- trace export ---------------------------------------------------------


def build_trace(
    events: Sequence[StageEvent], comm_events: Sequence[CommEvent] = ()
) -> dict:
    """Chrome-trace-format dict: one track per (section, dp_rank).

    Deterministic for identical inputs; timestamps are abstract time units
    scaled to microseconds.
    """
    sections = sorted({e.section for e in events} | {c.route for c in comm_events})
    pid_of = {name: i for i, name in enumerate(sections)}
    trace_events: list[dict] = []
    for name, pid in sorted(pid_of.items(), key=lambda kv: kv[1]):
        trace_events.append(
            {"ph": "M", "name": "process_name", "pid": pid, "tid": 0, "args": {"name": name}}
        )
    for e in events:
        trace_events.append(
            {
                "ph": "X",
                "name": f"{e.phase} s{e.sample_id}",
                "cat": "stage," + ("forward" if e.phase in FORWARD_PHASES else "backward"),
                "pid": pid_of[e.section],
                "tid": e.dp_rank,
                "ts": round(e.start * 1e6, 3),
                "dur": round((e.end - e.start) * 1e6, 3),
                "args": {"sample": e.sample_id, "phase": e.phase, "start": e.start, "end": e.end},
            }
        )
    for c in comm_events:
        trace_events.append(
            {
                "ph": "X",
                "name": f"xfer s{c.sample_id}",
                "cat": "comm",
                "pid": pid_of[c.route],
                "tid": 0,
                "ts": round(c.start * 1e6, 3),
                "dur": round((c.end - c.start) * 1e6, 3),
                "args": {"sample": c.sample_id, "bytes": c.bytes, "start": c.start, "end": c.end},
            }
        )
    return {"traceEvents": trace_events, "displayTimeUnit": "ms"}


def export_trace(
    events: Sequence[StageEvent],
    path: str,
    comm_events: Sequence[CommEvent] = (),
) -> None:
    """Write the chrome-trace JSON file (byte-stable for identical inputs)."""
    import json

    payload = json.dumps(build_trace(events, comm_events), indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload)
