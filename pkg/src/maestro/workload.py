"""Sections, the section dependency graph, samples and the cluster.

A *section* groups model submodules with similar compute/memory/communication
characteristics and is configured and scheduled as one unit.  Exactly one
section per graph is *critical* (the throughput bottleneck: LLM backbone,
distillation student); every other section is *auxiliary* and must lie on a
path through the critical section.

Graphs are immutable after construction; the colocation transforms return new
graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    ActivationError,
    BothActivated,
    CycleDetected,
    DisconnectedAuxiliary,
    DuplicateSection,
    EdgeNotFound,
    InvalidDims,
    MultipleCriticalSections,
    NegativeTime,
    NoCriticalSection,
    UnknownSection,
)

SectionId = str

PHASES = ("f_bc", "f_c", "f_ac", "b_bc", "b_c", "b_ac")


class Role(str, Enum):
    CRITICAL = "critical"
    AUXILIARY = "auxiliary"


class ExecMode(str, Enum):
    FORWARD_ONLY = "forward_only"
    FORWARD_BACKWARD = "forward_backward"


@dataclass(frozen=True)
class StructuralParams:
    """Model-structural quantities whose integer divisors bound parallelism."""

    hidden_dim: int
    num_heads: int
    num_layers: int
    vocab_size: int
    max_seq_len: int
    param_count: int = 0

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "num_heads", "num_layers", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise InvalidDims(f"{name} must be positive", field=name)
        if self.param_count < 0:
            raise InvalidDims("param_count must be nonnegative", field="param_count")


@dataclass(frozen=True)
class SectionConfig:
    """Per-section parallelism tuple {DP, TP, PP, CP, mbs, fanout}."""

    dp: int = 1
    tp: int = 1
    pp: int = 1
    cp: int = 1
    mbs: int = 1
    fanout: int = 1

    def __post_init__(self) -> None:
        for name in ("dp", "tp", "pp", "cp", "mbs", "fanout"):
            if getattr(self, name) < 1:
                raise InvalidDims(f"{name} must be >= 1", field=name)

    @property
    def gpu_count(self) -> int:
        return self.dp * self.tp * self.pp * self.cp

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.dp, self.tp, self.pp, self.cp, self.mbs, self.fanout)

    def divides(self, structural: StructuralParams) -> bool:
        """True when tp/pp/cp are divisors of the structural parameters."""
        return (
            structural.num_heads % self.tp == 0
            and structural.num_layers % self.pp == 0
            and structural.max_seq_len % self.cp == 0
        )


@dataclass(frozen=True)
class SectionSpec:
    id: SectionId
    role: Role
    exec_mode: ExecMode
    structural: StructuralParams
    submodules: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidDims("section id must be non-empty", field="id")
        if not self.submodules:
            object.__setattr__(self, "submodules", (self.id,))

    @property
    def is_critical(self) -> bool:
        return self.role is Role.CRITICAL

    @property
    def forward_only(self) -> bool:
        return self.exec_mode is ExecMode.FORWARD_ONLY


@dataclass(frozen=True)
class Edge:
    src: SectionId
    dst: SectionId
    payload_bytes_per_sample: float = 0.0

    def __post_init__(self) -> None:
        if self.payload_bytes_per_sample < 0:
            raise InvalidDims("payload_bytes_per_sample must be nonnegative")


@dataclass(frozen=True)
class ClusterSpec:
    total_gpus: int
    mem_per_gpu: float

    def __post_init__(self) -> None:
        if self.total_gpus < 1:
            raise InvalidDims("total_gpus must be positive", field="total_gpus")
        if self.mem_per_gpu <= 0:
            raise InvalidDims("mem_per_gpu must be positive", field="mem_per_gpu")


@dataclass(frozen=True)
class SampleTiming:
    """Per-sample cost 6-tuple plus the set of sections the sample activates.

    Times are abstract nonnegative reals.  bc/c/ac name the position in each
    pass's own temporal order, so t_f_bc and t_b_ac both belong to upstream
    (encoder-like) sections while t_f_ac and t_b_bc belong to downstream ones.
    """

    sample_id: int
    t_f_bc: float = 0.0
    t_f_c: float = 0.0
    t_f_ac: float = 0.0
    t_b_bc: float = 0.0
    t_b_c: float = 0.0
    t_b_ac: float = 0.0
    activated_sections: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.sample_id < 0:
            raise InvalidDims("sample_id must be nonnegative")
        for phase in PHASES:
            t = getattr(self, f"t_{phase}")
            if not math.isfinite(t) or t < 0:
                raise NegativeTime(
                    f"t_{phase} must be finite and nonnegative", sample=self.sample_id
                )
        if self.t_f_c <= 0:
            raise NegativeTime(
                "t_f_c must be positive: every sample passes through the critical section",
                sample=self.sample_id,
            )

    @property
    def upstream_time(self) -> float:
        return self.t_f_bc + self.t_b_ac

    @property
    def critical_time(self) -> float:
        return self.t_f_c + self.t_b_c

    @property
    def downstream_time(self) -> float:
        return self.t_f_ac + self.t_b_bc

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.t_f_bc, self.t_f_c, self.t_f_ac, self.t_b_bc, self.t_b_c, self.t_b_ac)


class Side(str, Enum):
    """Position of a section relative to the critical section."""

    UPSTREAM = "upstream"
    CRITICAL = "critical"
    DOWNSTREAM = "downstream"


@dataclass(frozen=True)
class SectionGraph:
    """Validated acyclic section graph with exactly one critical section."""

    sections: tuple[SectionSpec, ...]
    edges: tuple[Edge, ...]
    _by_id: Mapping[SectionId, SectionSpec] = field(default_factory=dict, repr=False)
    _sides: Mapping[SectionId, Side] = field(default_factory=dict, repr=False)

    # -- accessors -------------------------------------------------------

    @property
    def critical(self) -> SectionSpec:
        for s in self.sections:
            if s.is_critical:
                return s
        raise NoCriticalSection("graph has no critical section")

    def section(self, section_id: SectionId) -> SectionSpec:
        try:
            return self._by_id[section_id]
        except KeyError:
            raise UnknownSection(f"unknown section '{section_id}'", section=section_id)

    def side(self, section_id: SectionId) -> Side:
        self.section(section_id)
        return self._sides[section_id]

    @property
    def section_ids(self) -> tuple[SectionId, ...]:
        return tuple(s.id for s in self.sections)

    @property
    def auxiliaries(self) -> tuple[SectionSpec, ...]:
        return tuple(s for s in self.sections if not s.is_critical)

    def owning_section(self, submodule: str) -> SectionSpec:
        """Resolve a submodule (or section) name to the section owning it."""
        if submodule in self._by_id:
            return self._by_id[submodule]
        for s in self.sections:
            if submodule in s.submodules:
                return s
        raise UnknownSection(f"no section owns submodule '{submodule}'", submodule=submodule)

    def edge_between(self, a: SectionId, b: SectionId) -> Optional[Edge]:
        for e in self.edges:
            if (e.src, e.dst) in ((a, b), (b, a)):
                return e
        return None

    def successors(self, section_id: SectionId) -> tuple[SectionId, ...]:
        return tuple(e.dst for e in self.edges if e.src == section_id)

    def predecessors(self, section_id: SectionId) -> tuple[SectionId, ...]:
        return tuple(e.src for e in self.edges if e.dst == section_id)

    def neighbor_toward_critical(self, section_id: SectionId) -> SectionId:
        """Next hop from an auxiliary section along its path to the critical.

        The fan-out relation DP^aux x fanout^aux = DP^neighbor is anchored on
        this edge (the auxiliary is always the faster side).
        """
        side = self.side(section_id)
        if side is Side.CRITICAL:
            raise UnknownSection("critical section has no toward-critical neighbor")
        hops = self.successors(section_id) if side is Side.UPSTREAM else self.predecessors(section_id)
        for hop in hops:
            hop_side = self.side(hop)
            if hop_side is Side.CRITICAL or hop_side is side:
                return hop
        raise DisconnectedAuxiliary(
            f"section '{section_id}' has no edge toward the critical section",
            section=section_id,
        )

    def topological_order(self) -> tuple[SectionId, ...]:
        order: list[SectionId] = []
        indeg = {s.id: 0 for s in self.sections}
        for e in self.edges:
            indeg[e.dst] += 1
        ready = sorted(sid for sid, d in indeg.items() if d == 0)
        while ready:
            sid = ready.pop(0)
            order.append(sid)
            for nxt in sorted(self.successors(sid)):
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
            ready.sort()
        return tuple(order)

    # -- per-sample activation resolution ---------------------------------

    def resolve_activation(self, sample: SampleTiming) -> tuple[Optional[SectionId], Optional[SectionId]]:
        """Map a sample onto (upstream section, downstream section).

        Declared names are resolved through submodule ownership; two declared
        names landing in one merged section raise BothActivated.  When the
        sample declares nothing but has nonzero side time, the section is
        auto-attributed iff the graph has exactly one candidate on that side.
        """
        declared_up: list[SectionId] = []
        declared_down: list[SectionId] = []
        seen_by_section: dict[SectionId, str] = {}
        for name in sorted(sample.activated_sections):
            owner = self.owning_section(name)
            if owner.id in seen_by_section and seen_by_section[owner.id] != name:
                raise BothActivated(
                    f"sample {sample.sample_id} activates '{seen_by_section[owner.id]}' and "
                    f"'{name}', both colocated in section '{owner.id}'",
                    sample=sample.sample_id,
                    section=owner.id,
                )
            seen_by_section[owner.id] = name
            side = self.side(owner.id)
            if side is Side.UPSTREAM:
                declared_up.append(owner.id)
            elif side is Side.DOWNSTREAM:
                declared_down.append(owner.id)
        if len(set(declared_up)) > 1 or len(set(declared_down)) > 1:
            raise ActivationError(
                f"sample {sample.sample_id} activates more than one section on the same "
                "side of the critical section; the 6-tuple cannot attribute that time",
                sample=sample.sample_id,
            )

        upstream = declared_up[0] if declared_up else None
        downstream = declared_down[0] if declared_down else None
        upstream = self._attribute(sample, upstream, sample.upstream_time, Side.UPSTREAM)
        downstream = self._attribute(sample, downstream, sample.downstream_time, Side.DOWNSTREAM)
        return upstream, downstream

    def _attribute(
        self,
        sample: SampleTiming,
        declared: Optional[SectionId],
        side_time: float,
        side: Side,
    ) -> Optional[SectionId]:
        if side_time <= 0:
            # Zero time in every owned phase means the section is not activated.
            return None
        if declared is not None:
            return declared
        candidates = [s.id for s in self.auxiliaries if self._sides[s.id] is side]
        if len(candidates) == 1:
            return candidates[0]
        raise ActivationError(
            f"sample {sample.sample_id} has nonzero {side.value} time but does not declare "
            f"which of {candidates or 'no sections'} it activates",
            sample=sample.sample_id,
        )


def _validate(sections: Sequence[SectionSpec], edges: Sequence[Edge]) -> tuple[dict, dict]:
    by_id: dict[SectionId, SectionSpec] = {}
    submodule_owner: dict[str, SectionId] = {}
    for s in sections:
        if s.id in by_id:
            raise DuplicateSection(f"duplicate section id '{s.id}'", section=s.id)
        by_id[s.id] = s
    for s in sections:
        for sub in s.submodules:
            owner = submodule_owner.get(sub)
            if owner is not None and owner != s.id:
                raise DuplicateSection(
                    f"submodule '{sub}' declared by sections '{owner}' and '{s.id}'",
                    submodule=sub,
                )
            submodule_owner[sub] = s.id

    criticals = [s.id for s in sections if s.is_critical]
    if not criticals:
        raise NoCriticalSection("exactly one section must have role=critical")
    if len(criticals) > 1:
        raise MultipleCriticalSections(
            f"sections {criticals} all claim role=critical", sections=tuple(criticals)
        )

    seen_edges: set[tuple[SectionId, SectionId]] = set()
    for e in edges:
        for endpoint in (e.src, e.dst):
            if endpoint not in by_id:
                raise UnknownSection(f"edge endpoint '{endpoint}' is not a section", section=endpoint)
        if e.src == e.dst:
            raise CycleDetected(f"self-edge on '{e.src}'", section=e.src)
        if (e.src, e.dst) in seen_edges:
            raise DuplicateSection(f"duplicate edge {e.src}->{e.dst}")
        seen_edges.add((e.src, e.dst))

    # Kahn's algorithm; leftovers mean a cycle.
    indeg = {sid: 0 for sid in by_id}
    succ: dict[SectionId, list[SectionId]] = {sid: [] for sid in by_id}
    for e in edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    queue = [sid for sid, d in indeg.items() if d == 0]
    visited = 0
    while queue:
        sid = queue.pop()
        visited += 1
        for nxt in succ[sid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    if visited != len(by_id):
        leftover = sorted(sid for sid, d in indeg.items() if d > 0)
        raise CycleDetected(f"cycle through sections {leftover}", sections=tuple(leftover))

    critical = criticals[0]
    reaches_cr = _reachable_reverse(critical, edges)
    reached_from_cr = _reachable_forward(critical, edges)
    sides: dict[SectionId, Side] = {critical: Side.CRITICAL}
    for s in sections:
        if s.id == critical:
            continue
        if s.id in reaches_cr:
            sides[s.id] = Side.UPSTREAM
        elif s.id in reached_from_cr:
            sides[s.id] = Side.DOWNSTREAM
        else:
            raise DisconnectedAuxiliary(
                f"auxiliary '{s.id}' lies on no path through the critical section",
                section=s.id,
            )
    return by_id, sides


def _reachable_forward(start: SectionId, edges: Sequence[Edge]) -> set[SectionId]:
    out: set[SectionId] = set()
    frontier = [start]
    while frontier:
        node = frontier.pop()
        for e in edges:
            if e.src == node and e.dst not in out:
                out.add(e.dst)
                frontier.append(e.dst)
    return out


def _reachable_reverse(start: SectionId, edges: Sequence[Edge]) -> set[SectionId]:
    out: set[SectionId] = set()
    frontier = [start]
    while frontier:
        node = frontier.pop()
        for e in edges:
            if e.dst == node and e.src not in out:
                out.add(e.src)
                frontier.append(e.src)
    return out


def build_graph(sections: Iterable[SectionSpec], edges: Iterable[Edge] = ()) -> SectionGraph:
    """Validate and assemble a section graph.

    Raises CycleDetected / DuplicateSection / NoCriticalSection /
    MultipleCriticalSections / DisconnectedAuxiliary on invalid input.
    """
    sec = tuple(sections)
    edg = tuple(edges)
    by_id, sides = _validate(sec, edg)
    return SectionGraph(sections=sec, edges=edg, _by_id=by_id, _sides=sides)


# --- section-construction transforms ------------------------------------------


def colocate_output_layer(
    graph: SectionGraph,
    teacher: SectionId,
    student: SectionId,
    hidden_dim: int,
    vocab_size: int,
) -> SectionGraph:
    """Move the teacher's output layer into the student section.

    The teacher then ships hidden states instead of logits, so the edge
    payload shrinks by hidden_dim / vocab_size.  Only beneficial when the
    vocabulary is wider than the hidden dimension; rejected otherwise.
    Timing fields are never touched.
    """
    if vocab_size <= hidden_dim:
        raise InvalidDims(
            f"vocab_size ({vocab_size}) must exceed hidden_dim ({hidden_dim}) for "
            "output-layer colocation to shrink the payload",
            teacher=teacher,
            student=student,
        )
    graph.section(teacher)
    graph.section(student)
    edge = next((e for e in graph.edges if e.src == teacher and e.dst == student), None)
    if edge is None:
        raise EdgeNotFound(f"no edge {teacher}->{student}", src=teacher, dst=student)

    scale = hidden_dim / vocab_size
    new_edges = tuple(
        replace(e, payload_bytes_per_sample=e.payload_bytes_per_sample * scale)
        if e is edge
        else e
        for e in graph.edges
    )

    moved = "output_layer" if "output_layer" in graph.section(teacher).submodules else f"{teacher}.output_layer"
    new_sections = []
    for s in graph.sections:
        if s.id == teacher and moved in s.submodules:
            s = replace(s, submodules=tuple(m for m in s.submodules if m != moved))
        if s.id == student:
            s = replace(s, submodules=s.submodules + (moved,))
        new_sections.append(s)
    return build_graph(new_sections, new_edges)


def colocate_exclusive_encoders(graph: SectionGraph, a: SectionId, b: SectionId) -> SectionGraph:
    """Merge two mutually-exclusively-activated auxiliary sections into one.

    The merged section owns both submodule sets; a sample's timing is
    whichever submodule it activates, and a sample activating both raises
    BothActivated at schedule time.  Structural divisor fields merge by gcd
    so any admitted degree divides both originals; param_count sums because
    both submodules reside on the same GPUs.
    """
    if a == b:
        raise DuplicateSection(f"cannot merge section '{a}' with itself", section=a)
    sa, sb = graph.section(a), graph.section(b)
    for s in (sa, sb):
        if s.is_critical:
            raise InvalidDims(f"section '{s.id}' is critical; only auxiliaries merge", section=s.id)
    if sa.exec_mode is not sb.exec_mode:
        raise InvalidDims(
            f"cannot merge '{a}' ({sa.exec_mode.value}) with '{b}' ({sb.exec_mode.value})",
            a=a,
            b=b,
        )

    merged = SectionSpec(
        id=f"{a}+{b}",
        role=Role.AUXILIARY,
        exec_mode=sa.exec_mode,
        structural=StructuralParams(
            hidden_dim=max(sa.structural.hidden_dim, sb.structural.hidden_dim),
            num_heads=math.gcd(sa.structural.num_heads, sb.structural.num_heads),
            num_layers=math.gcd(sa.structural.num_layers, sb.structural.num_layers),
            vocab_size=max(sa.structural.vocab_size, sb.structural.vocab_size),
            max_seq_len=math.gcd(sa.structural.max_seq_len, sb.structural.max_seq_len),
            param_count=sa.structural.param_count + sb.structural.param_count,
        ),
        submodules=sa.submodules + sb.submodules,
    )

    remap = {a: merged.id, b: merged.id}
    rehomed: dict[tuple[SectionId, SectionId], float] = {}
    for e in graph.edges:
        src = remap.get(e.src, e.src)
        dst = remap.get(e.dst, e.dst)
        if src == dst:
            continue
        key = (src, dst)
        # Activations are mutually exclusive per sample: a merged duplicate
        # edge carries whichever payload is larger, never the sum.
        rehomed[key] = max(rehomed.get(key, 0.0), e.payload_bytes_per_sample)

    new_sections = [s for s in graph.sections if s.id not in (a, b)] + [merged]
    new_edges = [Edge(src, dst, payload) for (src, dst), payload in sorted(rehomed.items())]
    return build_graph(new_sections, new_edges)
