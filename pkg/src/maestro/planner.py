"""Two-stage per-section configuration optimizer.

Stage 1 (critical-first) picks the feasible critical-section config that
minimizes its own iteration time over the divisor-constrained enumeration.
Stage 2 (auxiliary-adaptive) gives each auxiliary, walking outward from the
critical section, the smallest GPU count whose per-iteration work still fits
inside the critical section's iteration time (no backpressure), subject to
the fan-out relation DP^aux x fanout = DP^neighbor and per-GPU memory.

Desk-scale enumerations are small, so "near-optimal" is realized as the
exact minimum over the (pruned) enumeration, with lexicographic
(dp, tp, pp, cp, mbs, fanout) tie-breaking for determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

from .costs import (
    BatchProfile,
    CostParams,
    MemoryEstimate,
    derive_batch,
    estimate_memory,
    estimate_step_time,
    section_iteration_time,
)
from .errors import (
    CannotAvoidStall,
    FanoutViolation,
    InfeasiblePlan,
    NoFeasibleConfig,
)
from .scheduling import ExecPolicy, build_schedule
from .workload import (
    ClusterSpec,
    SampleTiming,
    SectionConfig,
    SectionGraph,
    SectionId,
    SectionSpec,
    Side,
)


def _divisors(n: int, cap: Optional[int] = None) -> list[int]:
    out = [d for d in range(1, n + 1) if n % d == 0]
    if cap is not None:
        out = [d for d in out if d <= cap]
    return out


@dataclass(frozen=True)
class PlanOptions:
    """Search-space knobs shared by all planning entry points."""

    cp_cap: int = 16
    mbs_candidates: tuple[int, ...] = (1, 2, 4, 8, 16)
    critical_gpu_budget: Optional[int] = None
    policy: ExecPolicy = ExecPolicy.INTERLEAVED
    seed: int = 0


@dataclass(frozen=True)
class ConfigCandidate:
    config: SectionConfig
    step_time_per_sample: float  # (fwd + bwd) / mbs, comparable across mbs
    memory: MemoryEstimate


@dataclass(frozen=True)
class SectionPlan:
    config: SectionConfig
    gpu_count: int
    memory: MemoryEstimate
    iteration_time: float
    slack: float = 0.0


@dataclass(frozen=True)
class AllocationPlan:
    per_section: Mapping[SectionId, SectionPlan]
    total_gpus_used: int
    predicted_iteration_time: float
    feasible: bool = True
    diagnostics: tuple[str, ...] = ()

    def configs(self) -> dict[SectionId, SectionConfig]:
        return {sid: sp.config for sid, sp in self.per_section.items()}


def _matches_pin(config: SectionConfig, pinned: Optional[Mapping[str, int]]) -> bool:
    if not pinned:
        return True
    return all(getattr(config, k) == v for k, v in pinned.items())


def enumerate_configs(
    section: SectionSpec,
    cluster: ClusterSpec,
    params: CostParams,
    tokens_per_sample: int,
    options: PlanOptions = PlanOptions(),
    gpu_budget: Optional[int] = None,
    pinned: Optional[Mapping[str, int]] = None,
    fanout: int = 1,
) -> list[ConfigCandidate]:
    """All feasible configs: divisor degrees, GPU budget, memory fit.

    Sorted ascending by per-sample step time ((fwd+bwd)/mbs, so different
    micro-batch sizes are comparable), ties by lexicographic config tuple.
    """
    budget = cluster.total_gpus if gpu_budget is None else min(gpu_budget, cluster.total_gpus)
    s = section.structural
    out: list[ConfigCandidate] = []
    for tp in _divisors(s.num_heads):
        for pp in _divisors(s.num_layers):
            for cp in _divisors(s.max_seq_len, cap=options.cp_cap):
                shape = tp * pp * cp
                if shape > budget:
                    continue
                for mbs in options.mbs_candidates:
                    for dp in range(1, budget // shape + 1):
                        config = SectionConfig(dp=dp, tp=tp, pp=pp, cp=cp, mbs=mbs, fanout=fanout)
                        if not _matches_pin(config, pinned):
                            continue
                        memory = estimate_memory(section, config, params, tokens_per_sample)
                        if memory.total > cluster.mem_per_gpu:
                            continue
                        fwd, bwd = estimate_step_time(section, config, params, tokens_per_sample)
                        out.append(ConfigCandidate(config, (fwd + bwd) / mbs, memory))
    if not out:
        raise NoFeasibleConfig(
            f"no feasible config for section '{section.id}' within {budget} GPUs and "
            f"{cluster.mem_per_gpu:.3g} bytes/GPU",
            section=section.id,
        )
    out.sort(key=lambda c: (c.step_time_per_sample, c.config.as_tuple()))
    return out


def optimize_critical(
    critical: SectionSpec,
    cluster: ClusterSpec,
    params: CostParams,
    global_batch_size: int,
    tokens_per_sample: int,
    options: PlanOptions = PlanOptions(),
    gpu_budget: Optional[int] = None,
    pinned: Optional[Mapping[str, int]] = None,
    measured_load: Optional[float] = None,
) -> tuple[SectionConfig, int]:
    """Stage 1: feasible config minimizing the critical section's iteration time.

    With `measured_load` (total per-iteration work from declared 6-tuples),
    iteration time is load / dp; otherwise the cost model's closed form.
    """
    candidates = enumerate_configs(
        critical, cluster, params, tokens_per_sample, options, gpu_budget, pinned
    )
    best: Optional[tuple[float, tuple[int, ...]]] = None
    best_config: Optional[SectionConfig] = None
    for cand in candidates:
        if measured_load is not None:
            t = measured_load / cand.config.dp
        else:
            n_rank = math.ceil(global_batch_size / cand.config.dp)
            t = section_iteration_time(critical, cand.config, params, tokens_per_sample, n_rank)
        key = (t, cand.config.as_tuple())
        if best is None or key < best:
            best, best_config = key, cand.config
    assert best_config is not None
    return best_config, best_config.gpu_count


def fit_auxiliary(
    aux: SectionSpec,
    critical_time_per_iter: float,
    workload_share: float,
    cluster_remaining: int,
    params: CostParams,
    dp_critical: int,
    mem_per_gpu: float,
    global_batch_size: int,
    tokens_per_sample: int,
    options: PlanOptions = PlanOptions(),
    pinned: Optional[Mapping[str, int]] = None,
    measured_load: Optional[float] = None,
) -> tuple[SectionConfig, int]:
    """Stage 2: smallest-GPU config that never stalls the critical section.

    fanout must divide dp_critical exactly (DP^aux = dp_critical / fanout);
    feasible candidates satisfy memory and aux-iteration-time <= critical
    iteration time.  Among equal GPU counts the most slack wins, then the
    lexicographic config.  With `measured_load`, per-rank work is load / dp.
    """
    if cluster_remaining < 1:
        raise NoFeasibleConfig(
            f"no GPUs remain for auxiliary '{aux.id}'", section=aux.id
        )
    activated = min(global_batch_size, round(workload_share * global_batch_size))
    s = aux.structural
    any_fits = False
    best_key: Optional[tuple[int, float, tuple[int, ...]]] = None
    best: Optional[SectionConfig] = None
    for fanout in _divisors(dp_critical):
        dp = dp_critical // fanout
        n_rank = math.ceil(activated / dp) if activated else 0
        for tp in _divisors(s.num_heads):
            for pp in _divisors(s.num_layers):
                for cp in _divisors(s.max_seq_len, cap=options.cp_cap):
                    for mbs in options.mbs_candidates:
                        config = SectionConfig(dp=dp, tp=tp, pp=pp, cp=cp, mbs=mbs, fanout=fanout)
                        if not _matches_pin(config, pinned):
                            continue
                        if config.gpu_count > cluster_remaining:
                            continue
                        memory = estimate_memory(aux, config, params, tokens_per_sample)
                        if memory.total > mem_per_gpu:
                            continue
                        any_fits = True
                        if measured_load is not None:
                            t = measured_load / dp
                        else:
                            t = section_iteration_time(aux, config, params, tokens_per_sample, n_rank)
                        if t > critical_time_per_iter:
                            continue
                        slack = critical_time_per_iter - t
                        key = (config.gpu_count, -slack, config.as_tuple())
                        if best_key is None or key < best_key:
                            best_key, best = key, config
    if best is None:
        if not any_fits:
            raise NoFeasibleConfig(
                f"no config of auxiliary '{aux.id}' fits {cluster_remaining} GPUs and "
                f"{mem_per_gpu:.3g} bytes/GPU",
                section=aux.id,
            )
        raise CannotAvoidStall(
            f"auxiliary '{aux.id}' cannot keep pace with the critical section "
            f"({critical_time_per_iter:.4g} per iteration) using {cluster_remaining} "
            "remaining GPUs",
            section=aux.id,
        )
    return best, best.gpu_count


def verify_plan(
    graph: SectionGraph,
    cluster: ClusterSpec,
    params_by_section: Mapping[SectionId, CostParams],
    configs: Mapping[SectionId, SectionConfig],
    tokens_by_section: Mapping[SectionId, int],
    raise_on_violation: bool = True,
) -> list[str]:
    """Check the three global constraints on a candidate plan.

    Fan-out violations raise FanoutViolation; resource/memory violations
    raise InfeasiblePlan (or, with raise_on_violation=False, everything is
    returned as a diagnostics list).
    """
    diagnostics: list[str] = []
    fanout_violations: list[str] = []

    total = sum(configs[s.id].gpu_count for s in graph.sections)
    if total > cluster.total_gpus:
        diagnostics.append(
            f"resource: sum of section GPUs {total} exceeds cluster total {cluster.total_gpus}"
        )
    for section in graph.sections:
        cfg = configs[section.id]
        if not cfg.divides(section.structural):
            diagnostics.append(
                f"divisors: section '{section.id}' config tp={cfg.tp} pp={cfg.pp} cp={cfg.cp} "
                "does not divide its structural params"
            )
            continue
        memory = estimate_memory(
            section, cfg, params_by_section[section.id], tokens_by_section[section.id]
        )
        if memory.total > cluster.mem_per_gpu:
            diagnostics.append(
                f"memory: section '{section.id}' needs {memory.total:.4g} bytes/GPU, "
                f"budget {cluster.mem_per_gpu:.4g}"
            )
    crit_cfg = configs[graph.critical.id]
    if crit_cfg.fanout != 1:
        fanout_violations.append(
            f"fanout: critical section '{graph.critical.id}' must have fanout 1, got {crit_cfg.fanout}"
        )
    for aux in graph.auxiliaries:
        cfg = configs[aux.id]
        neighbor = graph.neighbor_toward_critical(aux.id)
        dp_neighbor = configs[neighbor].dp
        if cfg.dp * cfg.fanout != dp_neighbor:
            fanout_violations.append(
                f"fanout: edge {aux.id}<->{neighbor}: DP^{aux.id} ({cfg.dp}) x fanout "
                f"({cfg.fanout}) != DP^{neighbor} ({dp_neighbor})"
            )

    if raise_on_violation and fanout_violations:
        raise FanoutViolation("; ".join(fanout_violations), edges=tuple(fanout_violations))
    if raise_on_violation and diagnostics:
        raise InfeasiblePlan("; ".join(diagnostics), violations=tuple(diagnostics))
    return fanout_violations + diagnostics


def _min_footprint(
    section: SectionSpec,
    cluster: ClusterSpec,
    params: CostParams,
    tokens: int,
    options: PlanOptions,
    pinned: Optional[Mapping[str, int]],
) -> int:
    """Smallest memory-feasible GPU count for one replica of a section."""
    pin = dict(pinned or {})
    if "dp" in pin or "fanout" in pin:
        # A full pin decides the footprint outright.
        if all(k in pin for k in ("dp", "tp", "pp", "cp")):
            return pin["dp"] * pin["tp"] * pin["pp"] * pin["cp"]
        pin.pop("dp", None)
        pin.pop("fanout", None)
    candidates = enumerate_configs(
        section, cluster, params, tokens, options, pinned={**pin, "dp": 1}
    )
    return min(c.config.gpu_count for c in candidates)


def solve(
    graph: SectionGraph,
    cluster: ClusterSpec,
    params_by_section: Mapping[SectionId, CostParams],
    profile: BatchProfile,
    options: PlanOptions = PlanOptions(),
    pinned: Optional[Mapping[SectionId, Mapping[str, int]]] = None,
    explicit_batch: Optional[Sequence[SampleTiming]] = None,
) -> AllocationPlan:
    """Run both stages and evaluate the resulting plan end to end.

    Auxiliaries are fitted in increasing hop distance from the critical
    section (names break ties) so each one's toward-critical neighbor is
    already configured.  The returned plan's predicted_iteration_time is the
    simulated makespan of the derived (or explicitly given) batch, i.e. the
    same evaluator the acceptance oracles use.
    """
    from .simulator import simulate  # local import: simulator is a consumer elsewhere

    pinned = pinned or {}
    critical = graph.critical
    tokens = {s.id: profile.tokens_for(s) for s in graph.sections}
    b = profile.global_batch_size

    # Declared 6-tuples are ground truth for per-iteration work when present;
    # the cost model then only gates memory and GPU feasibility.
    loads: Optional[dict[SectionId, float]] = None
    if explicit_batch is not None:
        loads = {s.id: 0.0 for s in graph.sections}
        for sample in explicit_batch:
            loads[critical.id] += sample.critical_time
            up, down = graph.resolve_activation(sample)
            if up is not None:
                loads[up] += sample.upstream_time
            if down is not None:
                loads[down] += sample.downstream_time

    reserve = 0
    for aux in graph.auxiliaries:
        reserve += _min_footprint(
            aux, cluster, params_by_section[aux.id], tokens[aux.id], options, pinned.get(aux.id)
        )
    budget = options.critical_gpu_budget
    if budget is None:
        budget = cluster.total_gpus - reserve
    if budget < 1:
        raise NoFeasibleConfig(
            f"critical budget {budget} after reserving {reserve} GPUs for auxiliaries",
            section=critical.id,
        )

    crit_config, crit_gpus = optimize_critical(
        critical,
        cluster,
        params_by_section[critical.id],
        b,
        tokens[critical.id],
        options,
        gpu_budget=budget,
        pinned=pinned.get(critical.id),
        measured_load=None if loads is None else loads[critical.id],
    )
    if loads is not None:
        crit_time = loads[critical.id] / crit_config.dp
    else:
        crit_time = section_iteration_time(
            critical,
            crit_config,
            params_by_section[critical.id],
            tokens[critical.id],
            math.ceil(b / crit_config.dp),
        )

    configs: dict[SectionId, SectionConfig] = {critical.id: crit_config}
    iteration_times: dict[SectionId, float] = {critical.id: crit_time}
    remaining = cluster.total_gpus - crit_gpus

    by_distance: list[tuple[int, SectionId]] = []
    for aux in graph.auxiliaries:
        hops, node = 0, aux.id
        while graph.side(node) is not Side.CRITICAL:
            node = graph.neighbor_toward_critical(node)
            hops += 1
        by_distance.append((hops, aux.id))
    for _, aux_id in sorted(by_distance):
        aux = graph.section(aux_id)
        neighbor = graph.neighbor_toward_critical(aux_id)
        share = profile.shares.get(aux_id, 0.0)
        cfg, gpus = fit_auxiliary(
            aux,
            crit_time,
            share,
            remaining,
            params_by_section[aux_id],
            configs[neighbor].dp,
            cluster.mem_per_gpu,
            b,
            tokens[aux_id],
            options,
            pinned=pinned.get(aux_id),
            measured_load=None if loads is None else loads[aux_id],
        )
        configs[aux_id] = cfg
        if loads is not None:
            iteration_times[aux_id] = loads[aux_id] / cfg.dp
        else:
            activated = min(b, round(share * b))
            n_rank = math.ceil(activated / cfg.dp) if activated else 0
            iteration_times[aux_id] = section_iteration_time(
                aux, cfg, params_by_section[aux_id], tokens[aux_id], n_rank
            )
        remaining -= gpus

    verify_plan(graph, cluster, params_by_section, configs, tokens)

    batch = list(explicit_batch) if explicit_batch is not None else derive_batch(
        graph, configs, params_by_section, profile, options.seed
    )
    schedule = build_schedule(graph, configs, batch, options.policy)
    report, _events = simulate(graph, configs, schedule)

    per_section: dict[SectionId, SectionPlan] = {}
    for section in graph.sections:
        cfg = configs[section.id]
        per_section[section.id] = SectionPlan(
            config=cfg,
            gpu_count=cfg.gpu_count,
            memory=estimate_memory(
                section, cfg, params_by_section[section.id], tokens[section.id]
            ),
            iteration_time=iteration_times[section.id],
            slack=0.0 if section.is_critical else crit_time - iteration_times[section.id],
        )
    return AllocationPlan(
        per_section=per_section,
        total_gpus_used=sum(cfg.gpu_count for cfg in configs.values()),
        predicted_iteration_time=report.makespan,
        feasible=True,
        diagnostics=(),
    )
