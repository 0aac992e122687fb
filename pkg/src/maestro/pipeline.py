"""End-to-end orchestration and artifact (de)serialization.

The service endpoints and the CLI both funnel through these functions:
optimize -> schedule -> simulate over a WorkloadSpec, producing plain dicts
that serialize byte-stably (canonical JSON with sorted keys).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .costs import CostParams
from .errors import ParseError
from .planner import (
    AllocationPlan,
    PlanOptions,
    SectionPlan,
    solve,
    verify_plan,
)
from .scheduling import (
    ExecPolicy,
    Schedule,
    build_schedule,
    rank_metrics,
)
from .simulator import CommEvent, IterationReport, StageEvent, build_trace, simulate
from .specfile import WorkloadSpec
from .workload import SampleTiming, SectionConfig, SectionId
from .costs import derive_batch

PLAN_VERSION = "maestro-plan v1"
SCHEDULE_VERSION = "maestro-schedule v1"


@dataclass(frozen=True)
class RunOptions:
    """Flags shared by the service endpoints and CLI commands."""

    policy: ExecPolicy = ExecPolicy.INTERLEAVED
    comm: str = "zero"  # "zero" or "linear:<GBps>"
    cp_cap: int = 16
    seed: int = 0
    aux_execution: str = "merged"
    critical_gpu_budget: Optional[int] = None

    def plan_options(self) -> PlanOptions:
        return PlanOptions(
            cp_cap=self.cp_cap,
            critical_gpu_budget=self.critical_gpu_budget,
            policy=self.policy,
            seed=self.seed,
        )

    def comm_model(self):
        if self.comm == "zero":
            return None
        if self.comm.startswith("linear:"):
            try:
                gbps = float(self.comm.split(":", 1)[1])
            except ValueError:
                raise ParseError(f"bad comm spec '{self.comm}': expected linear:<GBps>")
            if gbps <= 0:
                raise ParseError(f"bad comm spec '{self.comm}': bandwidth must be positive")
            return lambda nbytes: nbytes / (gbps * 1e9)
        raise ParseError(f"bad comm spec '{self.comm}': expected 'zero' or 'linear:<GBps>'")


# --- artifact dict forms --------------------------------------------------


def config_to_dict(config: SectionConfig) -> dict[str, int]:
    return {
        "dp": config.dp,
        "tp": config.tp,
        "pp": config.pp,
        "cp": config.cp,
        "mbs": config.mbs,
        "fanout": config.fanout,
    }


def plan_to_dict(plan: AllocationPlan) -> dict[str, Any]:
    return {
        "version": PLAN_VERSION,
        "sections": {
            sid: {
                "config": config_to_dict(sp.config),
                "gpu_count": sp.gpu_count,
                "memory": sp.memory.as_dict(),
                "iteration_time": sp.iteration_time,
                "slack": sp.slack,
            }
            for sid, sp in sorted(plan.per_section.items())
        },
        "total_gpus_used": plan.total_gpus_used,
        "predicted_iteration_time": plan.predicted_iteration_time,
        "feasible": plan.feasible,
        "diagnostics": list(plan.diagnostics),
    }


def plan_from_dict(doc: Mapping[str, Any]) -> AllocationPlan:
    if doc.get("version") != PLAN_VERSION:
        raise ParseError(f"plan version mismatch: expected '{PLAN_VERSION}', got {doc.get('version')!r}")
    from .costs import MemoryEstimate

    per_section: dict[SectionId, SectionPlan] = {}
    for sid, raw in doc["sections"].items():
        mem = raw["memory"]
        per_section[sid] = SectionPlan(
            config=SectionConfig(**raw["config"]),
            gpu_count=raw["gpu_count"],
            memory=MemoryEstimate(
                weights=mem["weights"],
                optimizer_state=mem["optimizer_state"],
                gradients=mem["gradients"],
                activations=mem["activations"],
            ),
            iteration_time=raw["iteration_time"],
            slack=raw.get("slack", 0.0),
        )
    return AllocationPlan(
        per_section=per_section,
        total_gpus_used=doc["total_gpus_used"],
        predicted_iteration_time=doc["predicted_iteration_time"],
        feasible=doc.get("feasible", True),
        diagnostics=tuple(doc.get("diagnostics", ())),
    )


def sample_to_dict(sample: SampleTiming) -> dict[str, Any]:
    return {
        "id": sample.sample_id,
        "t_f_bc": sample.t_f_bc,
        "t_f_c": sample.t_f_c,
        "t_f_ac": sample.t_f_ac,
        "t_b_bc": sample.t_b_bc,
        "t_b_c": sample.t_b_c,
        "t_b_ac": sample.t_b_ac,
        "activates": sorted(sample.activated_sections),
    }


def sample_from_dict(doc: Mapping[str, Any]) -> SampleTiming:
    return SampleTiming(
        sample_id=doc["id"],
        t_f_bc=doc.get("t_f_bc", 0.0),
        t_f_c=doc["t_f_c"],
        t_f_ac=doc.get("t_f_ac", 0.0),
        t_b_bc=doc.get("t_b_bc", 0.0),
        t_b_c=doc.get("t_b_c", 0.0),
        t_b_ac=doc.get("t_b_ac", 0.0),
        activated_sections=frozenset(doc.get("activates", ())),
    )


def schedule_to_dict(schedule: Schedule) -> dict[str, Any]:
    orders: dict[str, dict[str, list[int]]] = {}
    for (section, rank), order in sorted(schedule.per_rank_orders.items()):
        orders.setdefault(section, {})[str(rank)] = list(order)
    return {
        "version": SCHEDULE_VERSION,
        "policy": schedule.policy.value,
        "per_rank_orders": orders,
        "batch": [sample_to_dict(s) for s in schedule.batch],
    }


def schedule_from_dict(doc: Mapping[str, Any]) -> Schedule:
    if doc.get("version") != SCHEDULE_VERSION:
        raise ParseError(
            f"schedule version mismatch: expected '{SCHEDULE_VERSION}', got {doc.get('version')!r}"
        )
    orders: dict[tuple[SectionId, int], tuple[int, ...]] = {}
    for section, ranks in doc["per_rank_orders"].items():
        for rank, order in ranks.items():
            orders[(section, int(rank))] = tuple(order)
    return Schedule(
        per_rank_orders=orders,
        batch=tuple(sample_from_dict(s) for s in doc["batch"]),
        policy=ExecPolicy.parse(doc.get("policy", "interleaved")),
    )


def report_to_dict(report: IterationReport) -> dict[str, Any]:
    return {
        "makespan": report.makespan,
        "critical_idle": report.critical_idle,
        "critical_idle_per_rank": {str(r): v for r, v in sorted(report.critical_idle_per_rank.items())},
        "per_section_busy_time": dict(sorted(report.per_section_busy_time.items())),
        "per_section_idle_time": dict(sorted(report.per_section_idle_time.items())),
        "per_resource": {
            f"{section}/{rank}": {
                "busy": stats.busy,
                "first_start": stats.first_start,
                "last_end": stats.last_end,
            }
            for (section, rank), stats in sorted(report.per_resource.items())
        },
        "comm_events": [
            {
                "route": c.route,
                "sample": c.sample_id,
                "bytes": c.bytes,
                "start": c.start,
                "end": c.end,
            }
            for c in report.comm_events
        ],
    }


def canonical_json(doc: Any) -> str:
    """Stable serialization: sorted keys, two-space indent, trailing newline."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


# --- pipeline stages --------------------------------------------------------


def run_optimize(spec: WorkloadSpec, options: RunOptions = RunOptions()) -> AllocationPlan:
    return solve(
        spec.graph,
        spec.cluster,
        spec.params_by_section,
        spec.effective_profile(),
        options.plan_options(),
        pinned=spec.pinned,
        explicit_batch=spec.batch,
    )


def batch_for(spec: WorkloadSpec, plan: AllocationPlan, options: RunOptions) -> list[SampleTiming]:
    """The explicit batch when declared, else one derived from the cost model."""
    if spec.batch is not None:
        return list(spec.batch)
    return derive_batch(
        spec.graph,
        plan.configs(),
        spec.params_by_section,
        spec.effective_profile(),
        options.seed,
    )


def run_schedule(
    spec: WorkloadSpec,
    options: RunOptions = RunOptions(),
    plan: Optional[AllocationPlan] = None,
) -> tuple[AllocationPlan, Schedule, dict[str, Any]]:
    if plan is None:
        plan = run_optimize(spec, options)
    batch = batch_for(spec, plan, options)
    schedule = build_schedule(spec.graph, plan.configs(), batch, options.policy)
    critical = spec.graph.critical.id
    by_id = {s.sample_id: s for s in batch}
    per_rank: dict[str, Any] = {}
    for rank in schedule.ranks_of(critical):
        order = [by_id[sid] for sid in schedule.order_for(critical, rank)]
        metrics = rank_metrics(order, options.policy)
        per_rank[str(rank)] = {
            "makespan": metrics.makespan,
            "critical_busy": metrics.critical_busy,
            "critical_idle": metrics.critical_idle,
            "samples": [s.sample_id for s in order],
        }
    summary = {"policy": options.policy.value, "per_rank": per_rank}
    return plan, schedule, summary


def run_simulate(
    spec: WorkloadSpec,
    plan: AllocationPlan,
    schedule: Schedule,
    options: RunOptions = RunOptions(),
) -> tuple[IterationReport, list[StageEvent], dict[str, Any]]:
    report, events = simulate(
        spec.graph,
        plan.configs(),
        schedule,
        comm_model=options.comm_model(),
        aux_execution=options.aux_execution,
    )
    trace = build_trace(events, report.comm_events)
    return report, events, trace


def run_end2end(spec: WorkloadSpec, options: RunOptions = RunOptions()) -> dict[str, Any]:
    """optimize -> schedule -> simulate; the full artifact bundle as dicts."""
    plan, schedule, summary = run_schedule(spec, options)
    report, _events, trace = run_simulate(spec, plan, schedule, options)
    return {
        "plan": plan_to_dict(plan),
        "schedule": schedule_to_dict(schedule),
        "summary": summary,
        "report": report_to_dict(report),
        "trace": trace,
    }


# --- spec-level validation ---------------------------------------------------


def validate_document(doc: Any, source: str = "<dict>") -> list[dict[str, str]]:
    """Full schema + invariant check; returns machine-readable diagnostics."""
    from .specfile import parse_spec

    try:
        spec = parse_spec(doc, source)
    except ParseError as exc:
        return [{"code": "ParseError", "where": str(exc.context.get("field", source)), "message": str(exc)}]
    except Exception as exc:  # graph invariant violations carry their own names
        return [{"code": type(exc).__name__, "where": source, "message": str(exc)}]

    diagnostics: list[dict[str, str]] = []
    graph = spec.graph

    # Pinned-config structural divisibility and Eq. 1 on fully pinned edges.
    for sid, pin in sorted(spec.pinned.items()):
        section = graph.section(sid)
        cfg = SectionConfig(**{"dp": 1, "tp": 1, "pp": 1, "cp": 1, "mbs": 1, "fanout": 1, **pin})
        if not cfg.divides(section.structural):
            diagnostics.append(
                {
                    "code": "InvalidConfig",
                    "where": f"sections[{sid}].config",
                    "message": f"pinned tp={cfg.tp} pp={cfg.pp} cp={cfg.cp} does not divide "
                    f"section '{sid}' structural params",
                }
            )
    for aux in graph.auxiliaries:
        pin = spec.pinned.get(aux.id)
        if not pin or "dp" not in pin or "fanout" not in pin:
            continue
        neighbor = graph.neighbor_toward_critical(aux.id)
        npin = spec.pinned.get(neighbor)
        if not npin or "dp" not in npin:
            continue
        if pin["dp"] * pin["fanout"] != npin["dp"]:
            diagnostics.append(
                {
                    "code": "FanoutViolation",
                    "where": f"edge {aux.id}<->{neighbor}",
                    "message": f"DP^{aux.id} ({pin['dp']}) x fanout ({pin['fanout']}) != "
                    f"DP^{neighbor} ({npin['dp']})",
                }
            )

    # Cluster must hold at least one replica of every section.
    pinned_total = sum(
        (pin.get("dp", 1) * pin.get("tp", 1) * pin.get("pp", 1) * pin.get("cp", 1))
        for pin in spec.pinned.values()
    )
    unpinned = len(graph.sections) - len(spec.pinned)
    if pinned_total + unpinned > spec.cluster.total_gpus:
        diagnostics.append(
            {
                "code": "InfeasiblePlan",
                "where": "cluster",
                "message": f"cluster of {spec.cluster.total_gpus} GPUs cannot hold one replica "
                "of every section",
            }
        )
    return diagnostics
