"""Wavefront sample scheduling: greedy insertion over a 3-resource makespan model.

Each DP rank of the critical section is modeled together with one upstream
resource (owning t_f_bc and t_b_ac) and one downstream resource (owning
t_f_ac and t_b_bc).  Every sample follows the phase chain

    f_bc -> f_c -> f_ac -> b_bc -> b_c -> b_ac

with zero-duration phases skipped.  Resources execute their stages in a
fixed sequence derived from the candidate order: upstream runs all forward
stages in order and then all backward stages in order; the critical and
downstream resources either alternate forward/backward per sample
(ExecPolicy.INTERLEAVED, the Fig.-8-style saturated alternation) or run all
forwards then all backwards (ExecPolicy.ALL_FWD_THEN_BWD).  A stage starts
at max(resource-free time, predecessor-finish time).

The scheduler itself is the O(N^2)-evaluation greedy: sort ascending by
t_f_bc, then insert each remaining sample at the makespan-minimizing
position of the partial order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, TypeVar

from .errors import (
    EmptyBatch,
    FanoutMismatch,
    FanoutViolation,
    InconsistentSchedule,
)
from .workload import SampleTiming, SectionConfig, SectionGraph, SectionId, Side

T = TypeVar("T")


class ExecPolicy(str, Enum):
    """Forward/backward interleave of the critical and downstream resources."""

    INTERLEAVED = "interleaved"
    ALL_FWD_THEN_BWD = "all-fwd-then-bwd"

    @classmethod
    def parse(cls, value: "str | ExecPolicy") -> "ExecPolicy":
        if isinstance(value, ExecPolicy):
            return value
        try:
            return cls(value)
        except ValueError:
            options = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown exec policy '{value}' (options: {options})")


@dataclass(frozen=True)
class RankMetrics:
    """Timeline summary of one rank under the 3-resource model."""

    makespan: float
    critical_busy: float
    critical_span: float

    @property
    def critical_idle(self) -> float:
        return self.critical_span - self.critical_busy


@dataclass
class EvalCounter:
    """Counts calculate_makespan invocations made by schedule_rank."""

    count: int = 0


def sort_initial(samples: Sequence[SampleTiming]) -> list[SampleTiming]:
    """Ascending by t_f_bc; stable, so ties keep input order."""
    return sorted(samples, key=lambda s: s.t_f_bc)


def rank_metrics(order: Sequence[SampleTiming], policy: ExecPolicy = ExecPolicy.INTERLEAVED) -> RankMetrics:
    """Simulate one rank's fixed-sequence timeline and summarize it."""
    if not order:
        return RankMetrics(0.0, 0.0, 0.0)
    policy = ExecPolicy.parse(policy)

    # Upstream forward stages run back-to-back from t=0 in candidate order.
    ready_fc: list[float] = []
    u = 0.0
    for s in order:
        if s.t_f_bc > 0:
            u += s.t_f_bc
            ready_fc.append(u)
        else:
            ready_fc.append(0.0)

    ub = u  # upstream backward stages queue after all its forwards
    c = 0.0  # critical resource clock
    d = 0.0  # downstream resource clock
    makespan = 0.0
    crit_first: Optional[float] = None
    crit_last = 0.0
    crit_busy = 0.0

    def run_critical(start_floor: float, ready: float, dur: float) -> float:
        nonlocal c, crit_first, crit_last, crit_busy
        start = max(start_floor, ready)
        end = start + dur
        c = end
        if crit_first is None:
            crit_first = start
        crit_last = end
        crit_busy += dur
        return end

    if policy is ExecPolicy.INTERLEAVED:
        for k, s in enumerate(order):
            chain = run_critical(c, ready_fc[k], s.t_f_c)
            if s.t_f_ac > 0:
                start = max(d, chain)
                chain = d = start + s.t_f_ac
            if s.t_b_bc > 0:
                start = max(d, chain)
                chain = d = start + s.t_b_bc
            if s.t_b_c > 0:
                chain = run_critical(c, chain, s.t_b_c)
            if s.t_b_ac > 0:
                start = max(ub, chain)
                chain = ub = start + s.t_b_ac
            makespan = max(makespan, chain)
    else:
        chain_after_fwd: list[float] = []
        for k, s in enumerate(order):
            chain = run_critical(c, ready_fc[k], s.t_f_c)
            if s.t_f_ac > 0:
                start = max(d, chain)
                chain = d = start + s.t_f_ac
            chain_after_fwd.append(chain)
        for k, s in enumerate(order):
            chain = chain_after_fwd[k]
            if s.t_b_bc > 0:
                start = max(d, chain)
                chain = d = start + s.t_b_bc
            if s.t_b_c > 0:
                chain = run_critical(c, chain, s.t_b_c)
            if s.t_b_ac > 0:
                start = max(ub, chain)
                chain = ub = start + s.t_b_ac
            makespan = max(makespan, chain)

    first = crit_first if crit_first is not None else 0.0
    return RankMetrics(makespan=makespan, critical_busy=crit_busy, critical_span=crit_last - first)


def calculate_makespan(
    order: Sequence[SampleTiming], policy: ExecPolicy = ExecPolicy.INTERLEAVED
) -> float:
    """Makespan of one rank executing `order` under the 3-resource model."""
    return rank_metrics(order, policy).makespan


def schedule_rank(
    samples: Sequence[SampleTiming],
    policy: ExecPolicy = ExecPolicy.INTERLEAVED,
    counter: Optional[EvalCounter] = None,
) -> list[SampleTiming]:
    """Order one rank's samples by greedy best-position insertion.

    Seeds the order with the earliest-reaching sample (smallest t_f_bc),
    then inserts each remaining sample at the position minimizing the
    simulated makespan, ties to the smallest index.  The final in-budget
    evaluation compares against the input order so the result is never
    worse than it.  Total evaluations <= N(N+1)/2.
    """
    policy = ExecPolicy.parse(policy)
    n = len(samples)
    if n <= 1:
        return list(samples)

    def evaluate(order: list[SampleTiming]) -> float:
        if counter is not None:
            counter.count += 1
        return calculate_makespan(order, policy)

    initial = sort_initial(samples)
    result = [initial[0]]
    best_mk = 0.0
    for sample in initial[1:]:
        best_pos = 0
        best_mk = float("inf")
        for pos in range(len(result) + 1):
            mk = evaluate(result[:pos] + [sample] + result[pos:])
            if mk < best_mk:
                best_mk, best_pos = mk, pos
        result.insert(best_pos, sample)

    if evaluate(list(samples)) < best_mk:
        return list(samples)
    return result


def partition_batch(
    global_batch: Sequence[SampleTiming],
    dp_critical: int,
    graph: Optional[SectionGraph] = None,
) -> dict[int, list[SampleTiming]]:
    """Split the global batch across critical DP ranks.

    Longest-processing-time greedy on (t_f_c + t_b_c) under equal-count
    capacities (ranks differ by at most one sample; none are fabricated).
    Samples with heavier auxiliary work are placed first within critical-time
    ties, and rank choice breaks ties on the rank's existing load in the
    auxiliary sections this sample activates, so activated sections spread
    evenly.
    """
    if not global_batch:
        raise EmptyBatch("cannot partition an empty batch")
    if dp_critical < 1:
        raise FanoutMismatch(f"dp_critical must be >= 1, got {dp_critical}")

    def aux_keys(sample: SampleTiming) -> tuple[tuple[str, float], ...]:
        if graph is not None:
            up, down = graph.resolve_activation(sample)
            keys = []
            if up is not None:
                keys.append((up, sample.upstream_time))
            if down is not None:
                keys.append((down, sample.downstream_time))
            return tuple(keys)
        keys = []
        if sample.upstream_time > 0:
            keys.append(("upstream", sample.upstream_time))
        if sample.downstream_time > 0:
            keys.append(("downstream", sample.downstream_time))
        return tuple(keys)

    n = len(global_batch)
    base, extra = divmod(n, dp_critical)
    capacity = [base + (1 if r < extra else 0) for r in range(dp_critical)]

    ordered = sorted(
        global_batch,
        key=lambda s: (-s.critical_time, -(s.upstream_time + s.downstream_time), s.sample_id),
    )

    assignment: dict[int, list[SampleTiming]] = {r: [] for r in range(dp_critical)}
    crit_load = [0.0] * dp_critical
    aux_load: list[dict[str, float]] = [dict() for _ in range(dp_critical)]
    for sample in ordered:
        keys = aux_keys(sample)
        best_rank = -1
        best_key: tuple[float, float, int] | None = None
        for r in range(dp_critical):
            if len(assignment[r]) >= capacity[r]:
                continue
            sample_aux = sum(aux_load[r].get(sec, 0.0) for sec, _ in keys)
            key = (crit_load[r], sample_aux, r)
            if best_key is None or key < best_key:
                best_key, best_rank = key, r
        assignment[best_rank].append(sample)
        crit_load[best_rank] += sample.critical_time
        for sec, t in keys:
            aux_load[best_rank][sec] = aux_load[best_rank].get(sec, 0.0) + t
    return assignment


def merge_fanout(rank_schedules: Sequence[Sequence[T]], fanout: int) -> list[T]:
    """Round-robin interleave of `fanout` downstream rank orders.

    Takes element i from each list in turn, skipping exhausted lists, which
    preserves each rank's internal order and bounds the gap between two
    consecutive items of the same rank by the fanout.
    """
    if fanout < 1:
        raise FanoutMismatch(f"fanout must be >= 1, got {fanout}")
    if len(rank_schedules) != fanout:
        raise FanoutMismatch(
            f"expected {fanout} downstream rank schedules, got {len(rank_schedules)}"
        )
    merged: list[T] = []
    for i in range(max((len(r) for r in rank_schedules), default=0)):
        for r in rank_schedules:
            if i < len(r):
                merged.append(r[i])
    return merged


@dataclass(frozen=True)
class Schedule:
    """Per-(section, dp_rank) sample orders plus the batch they came from."""

    per_rank_orders: Mapping[tuple[SectionId, int], tuple[int, ...]]
    batch: tuple[SampleTiming, ...]
    policy: ExecPolicy = ExecPolicy.INTERLEAVED

    def order_for(self, section: SectionId, rank: int) -> tuple[int, ...]:
        return self.per_rank_orders.get((section, rank), ())

    def ranks_of(self, section: SectionId) -> list[int]:
        return sorted(r for (sec, r) in self.per_rank_orders if sec == section)

    def sample(self, sample_id: int) -> SampleTiming:
        for s in self.batch:
            if s.sample_id == sample_id:
                return s
        raise InconsistentSchedule(f"schedule references unknown sample {sample_id}")


def build_schedule(
    graph: SectionGraph,
    configs: Mapping[SectionId, SectionConfig],
    batch: Sequence[SampleTiming],
    policy: ExecPolicy = ExecPolicy.INTERLEAVED,
) -> Schedule:
    """Partition, order per critical rank, then fan-out-merge every auxiliary.

    Auxiliary rank q's order is the round-robin merge of its `fanout`
    neighbor ranks' orders, filtered to the samples that activate it;
    auxiliaries farther from the critical section merge the orders of their
    toward-critical neighbor, so the whole DAG is covered hop by hop.
    """
    policy = ExecPolicy.parse(policy)
    if not batch:
        raise EmptyBatch("cannot schedule an empty batch")
    ids = [s.sample_id for s in batch]
    if len(set(ids)) != len(ids):
        raise InconsistentSchedule("duplicate sample ids in batch")

    critical = graph.critical
    dp_crit = configs[critical.id].dp
    per_rank: dict[tuple[SectionId, int], tuple[int, ...]] = {}

    parts = partition_batch(batch, dp_crit, graph)
    for rank, assigned in parts.items():
        order = schedule_rank(assigned, policy)
        per_rank[(critical.id, rank)] = tuple(s.sample_id for s in order)

    # Which auxiliary each sample touches, per side.
    activation: dict[int, tuple[Optional[SectionId], Optional[SectionId]]] = {
        s.sample_id: graph.resolve_activation(s) for s in batch
    }

    def activates(sample_id: int, section: SectionId) -> bool:
        up, down = activation[sample_id]
        return section in (up, down)

    # Merge outward from the critical section: each auxiliary consumes the
    # orders of its neighbor toward the critical.
    by_distance: list[tuple[int, SectionId]] = []
    for aux in graph.auxiliaries:
        hops = 0
        node = aux.id
        while graph.side(node) is not Side.CRITICAL:
            node = graph.neighbor_toward_critical(node)
            hops += 1
        by_distance.append((hops, aux.id))
    for _, aux_id in sorted(by_distance):
        cfg = configs[aux_id]
        neighbor = graph.neighbor_toward_critical(aux_id)
        dp_neighbor = configs[neighbor].dp
        if cfg.dp * cfg.fanout != dp_neighbor:
            raise FanoutViolation(
                f"DP^{aux_id} ({cfg.dp}) x fanout ({cfg.fanout}) != DP^{neighbor} ({dp_neighbor})",
                edge=f"{aux_id}<->{neighbor}",
            )
        for q in range(cfg.dp):
            neighbor_orders = [
                [sid for sid in per_rank[(neighbor, r)] if activates(sid, aux_id)]
                for r in range(q * cfg.fanout, (q + 1) * cfg.fanout)
            ]
            per_rank[(aux_id, q)] = tuple(merge_fanout(neighbor_orders, cfg.fanout))

    return Schedule(per_rank_orders=per_rank, batch=tuple(batch), policy=policy)
