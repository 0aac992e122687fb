"""Workload spec files: `maestro-spec v1`.

YAML (JSON works too, being a YAML subset) with a fixed schema; unknown
fields are rejected with the offending path.  A spec declares sections,
data-flow edges, the cluster, optional colocation transforms, optional
pinned configs, per-section cost parameters (or presets), and either an
explicit sample batch or a statistical batch profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from .costs import BatchProfile, CostParams, PRESETS, preset
from .errors import MaestroError, ParseError
from .workload import (
    ClusterSpec,
    Edge,
    ExecMode,
    Role,
    SampleTiming,
    SectionGraph,
    SectionId,
    SectionSpec,
    StructuralParams,
    build_graph,
    colocate_exclusive_encoders,
    colocate_output_layer,
)

SCHEMA_VERSION = "maestro-spec v1"

_DEFAULT_COST = CostParams(
    flops_per_token_fwd=1.0e9,
    peak_flops_per_gpu=1.0e14,
    activation_bytes_per_token=0.0,
)


@dataclass(frozen=True)
class WorkloadSpec:
    """Everything the pipeline needs, parsed and validated."""

    graph: SectionGraph
    cluster: ClusterSpec
    params_by_section: Mapping[SectionId, CostParams]
    pinned: Mapping[SectionId, Mapping[str, int]]
    batch: Optional[tuple[SampleTiming, ...]]
    profile: Optional[BatchProfile]
    source: str = "<dict>"

    def effective_profile(self) -> BatchProfile:
        """The declared profile, or one derived from the explicit batch."""
        if self.profile is not None:
            return self.profile
        assert self.batch is not None
        counts: dict[SectionId, int] = {}
        for sample in self.batch:
            up, down = self.graph.resolve_activation(sample)
            for sid in (up, down):
                if sid is not None:
                    counts[sid] = counts.get(sid, 0) + 1
        b = len(self.batch)
        return BatchProfile(
            global_batch_size=b,
            shares={sid: n / b for sid, n in sorted(counts.items())},
        )


def _require(mapping: Any, path: str) -> dict:
    if not isinstance(mapping, dict):
        raise ParseError(f"{path}: expected a mapping, got {type(mapping).__name__}", field=path)
    return mapping


def _check_keys(mapping: dict, allowed: set[str], required: set[str], path: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ParseError(
            f"{path}: unknown field(s) {sorted(unknown)}; allowed: {sorted(allowed)}",
            field=path,
        )
    missing = required - set(mapping)
    if missing:
        raise ParseError(f"{path}: missing required field(s) {sorted(missing)}", field=path)


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{path}: expected a number, got {value!r}", field=path)
    return float(value)


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{path}: expected an integer, got {value!r}", field=path)
    return value


def _parse_structural(raw: Any, path: str) -> StructuralParams:
    m = _require(raw, path)
    allowed = {"hidden_dim", "num_heads", "num_layers", "vocab_size", "max_seq_len", "param_count"}
    _check_keys(m, allowed, allowed - {"param_count"}, path)
    return StructuralParams(
        hidden_dim=_integer(m["hidden_dim"], f"{path}.hidden_dim"),
        num_heads=_integer(m["num_heads"], f"{path}.num_heads"),
        num_layers=_integer(m["num_layers"], f"{path}.num_layers"),
        vocab_size=_integer(m["vocab_size"], f"{path}.vocab_size"),
        max_seq_len=_integer(m["max_seq_len"], f"{path}.max_seq_len"),
        param_count=_integer(m.get("param_count", 0), f"{path}.param_count"),
    )


def _parse_cost(raw: Any, path: str) -> CostParams:
    m = _require(raw, path)
    allowed = {
        "preset",
        "flops_per_token_fwd",
        "peak_flops_per_gpu",
        "bwd_fwd_ratio",
        "parallel_efficiency",
        "mbs_efficiency",
        "bytes_per_param_weights",
        "bytes_per_param_optimizer",
        "activation_bytes_per_token",
        "live_microbatch_cap",
    }
    _check_keys(m, allowed, set(), path)
    base = preset(m["preset"]) if "preset" in m else _DEFAULT_COST
    kwargs: dict[str, Any] = {
        "flops_per_token_fwd": base.flops_per_token_fwd,
        "peak_flops_per_gpu": base.peak_flops_per_gpu,
        "bwd_fwd_ratio": base.bwd_fwd_ratio,
        "parallel_efficiency": dict(base.parallel_efficiency),
        "mbs_efficiency": dict(base.mbs_efficiency),
        "bytes_per_param_weights": base.bytes_per_param_weights,
        "bytes_per_param_optimizer": base.bytes_per_param_optimizer,
        "activation_bytes_per_token": base.activation_bytes_per_token,
        "live_microbatch_cap": base.live_microbatch_cap,
    }
    for key in (
        "flops_per_token_fwd",
        "peak_flops_per_gpu",
        "bwd_fwd_ratio",
        "bytes_per_param_weights",
        "bytes_per_param_optimizer",
        "activation_bytes_per_token",
        "live_microbatch_cap",
    ):
        if key in m:
            kwargs[key] = _number(m[key], f"{path}.{key}")
    if "parallel_efficiency" in m:
        entries = m["parallel_efficiency"]
        if not isinstance(entries, list):
            raise ParseError(f"{path}.parallel_efficiency: expected a list of entries")
        eff: dict[tuple[int, int, int], float] = {}
        for i, entry in enumerate(entries):
            e = _require(entry, f"{path}.parallel_efficiency[{i}]")
            _check_keys(e, {"tp", "pp", "cp", "factor"}, {"tp", "pp", "cp", "factor"},
                        f"{path}.parallel_efficiency[{i}]")
            eff[(e["tp"], e["pp"], e["cp"])] = _number(e["factor"], f"{path}.parallel_efficiency[{i}].factor")
        kwargs["parallel_efficiency"] = eff
    if "mbs_efficiency" in m:
        entries = _require(m["mbs_efficiency"], f"{path}.mbs_efficiency")
        kwargs["mbs_efficiency"] = {
            _integer(k, f"{path}.mbs_efficiency key"): _number(v, f"{path}.mbs_efficiency[{k}]")
            for k, v in entries.items()
        }
    try:
        return CostParams(**kwargs)
    except MaestroError as exc:
        raise ParseError(f"{path}: {exc}", field=path)


def _parse_config_pin(raw: Any, path: str) -> dict[str, int]:
    m = _require(raw, path)
    allowed = {"dp", "tp", "pp", "cp", "mbs", "fanout"}
    _check_keys(m, allowed, set(), path)
    pin = {k: _integer(v, f"{path}.{k}") for k, v in m.items()}
    for k, v in pin.items():
        if v < 1:
            raise ParseError(f"{path}.{k}: must be >= 1, got {v}", field=f"{path}.{k}")
    return pin


def _parse_sample(raw: Any, index: int, path: str) -> SampleTiming:
    m = _require(raw, path)
    allowed = {"id", "t_f_bc", "t_f_c", "t_f_ac", "t_b_bc", "t_b_c", "t_b_ac", "activates"}
    _check_keys(m, allowed, {"t_f_c"}, path)
    activates = m.get("activates", [])
    if not isinstance(activates, list) or not all(isinstance(a, str) for a in activates):
        raise ParseError(f"{path}.activates: expected a list of section/submodule names")
    try:
        return SampleTiming(
            sample_id=_integer(m.get("id", index), f"{path}.id"),
            t_f_bc=_number(m.get("t_f_bc", 0), f"{path}.t_f_bc"),
            t_f_c=_number(m["t_f_c"], f"{path}.t_f_c"),
            t_f_ac=_number(m.get("t_f_ac", 0), f"{path}.t_f_ac"),
            t_b_bc=_number(m.get("t_b_bc", 0), f"{path}.t_b_bc"),
            t_b_c=_number(m.get("t_b_c", 0), f"{path}.t_b_c"),
            t_b_ac=_number(m.get("t_b_ac", 0), f"{path}.t_b_ac"),
            activated_sections=frozenset(activates),
        )
    except MaestroError as exc:
        raise ParseError(f"{path}: {exc}", field=path)


def _apply_transforms(graph: SectionGraph, raw: Any, path: str) -> SectionGraph:
    if raw is None:
        return graph
    if not isinstance(raw, list):
        raise ParseError(f"{path}: expected a list of transform records")
    for i, entry in enumerate(raw):
        m = _require(entry, f"{path}[{i}]")
        op = m.get("op")
        if op == "colocate_output_layer":
            _check_keys(m, {"op", "teacher", "student", "hidden_dim", "vocab_size"},
                        {"op", "teacher", "student", "hidden_dim", "vocab_size"}, f"{path}[{i}]")
            graph = colocate_output_layer(
                graph,
                m["teacher"],
                m["student"],
                _integer(m["hidden_dim"], f"{path}[{i}].hidden_dim"),
                _integer(m["vocab_size"], f"{path}[{i}].vocab_size"),
            )
        elif op == "colocate_exclusive_encoders":
            _check_keys(m, {"op", "a", "b"}, {"op", "a", "b"}, f"{path}[{i}]")
            graph = colocate_exclusive_encoders(graph, m["a"], m["b"])
        else:
            raise ParseError(
                f"{path}[{i}].op: unknown transform {op!r} "
                "(known: colocate_output_layer, colocate_exclusive_encoders)",
                field=f"{path}[{i}].op",
            )
    return graph


def parse_spec(doc: Any, source: str = "<dict>") -> WorkloadSpec:
    """Validate a parsed YAML/JSON document into a WorkloadSpec."""
    m = _require(doc, "spec")
    _check_keys(
        m,
        {"version", "sections", "edges", "cluster", "transforms", "batch"},
        {"version", "sections", "cluster", "batch"},
        "spec",
    )
    if m["version"] != SCHEMA_VERSION:
        raise ParseError(
            f"spec.version: expected '{SCHEMA_VERSION}', got {m['version']!r}",
            field="spec.version",
        )

    if not isinstance(m["sections"], list) or not m["sections"]:
        raise ParseError("spec.sections: expected a non-empty list")
    sections: list[SectionSpec] = []
    costs: dict[SectionId, CostParams] = {}
    pins: dict[SectionId, dict[str, int]] = {}
    for i, raw in enumerate(m["sections"]):
        path = f"spec.sections[{i}]"
        s = _require(raw, path)
        _check_keys(
            s,
            {"name", "role", "exec_mode", "structural", "submodules", "cost", "config"},
            {"name", "role", "exec_mode", "structural"},
            path,
        )
        name = s["name"]
        if not isinstance(name, str) or not name:
            raise ParseError(f"{path}.name: expected a non-empty string")
        try:
            role = Role(s["role"])
        except ValueError:
            raise ParseError(f"{path}.role: expected 'critical' or 'auxiliary', got {s['role']!r}")
        try:
            exec_mode = ExecMode(s["exec_mode"])
        except ValueError:
            raise ParseError(
                f"{path}.exec_mode: expected 'forward_only' or 'forward_backward', "
                f"got {s['exec_mode']!r}"
            )
        submodules: tuple[str, ...] = ()
        if "submodules" in s:
            if not isinstance(s["submodules"], list) or not all(
                isinstance(x, str) for x in s["submodules"]
            ):
                raise ParseError(f"{path}.submodules: expected a list of strings")
            submodules = tuple(s["submodules"])
        sections.append(
            SectionSpec(
                id=name,
                role=role,
                exec_mode=exec_mode,
                structural=_parse_structural(s["structural"], f"{path}.structural"),
                submodules=submodules,
            )
        )
        if "cost" in s:
            costs[name] = _parse_cost(s["cost"], f"{path}.cost")
        if "config" in s:
            pins[name] = _parse_config_pin(s["config"], f"{path}.config")

    edges: list[Edge] = []
    for i, raw in enumerate(m.get("edges", []) or []):
        path = f"spec.edges[{i}]"
        e = _require(raw, path)
        _check_keys(e, {"from", "to", "payload_bytes_per_sample"}, {"from", "to"}, path)
        edges.append(
            Edge(
                src=e["from"],
                dst=e["to"],
                payload_bytes_per_sample=_number(
                    e.get("payload_bytes_per_sample", 0), f"{path}.payload_bytes_per_sample"
                ),
            )
        )

    c = _require(m["cluster"], "spec.cluster")
    _check_keys(c, {"total_gpus", "mem_per_gpu"}, {"total_gpus", "mem_per_gpu"}, "spec.cluster")
    cluster = ClusterSpec(
        total_gpus=_integer(c["total_gpus"], "spec.cluster.total_gpus"),
        mem_per_gpu=_number(c["mem_per_gpu"], "spec.cluster.mem_per_gpu"),
    )

    try:
        graph = build_graph(sections, edges)
        graph = _apply_transforms(graph, m.get("transforms"), "spec.transforms")
    except ParseError:
        raise
    except MaestroError as exc:
        raise ParseError(f"spec: {exc}", field="spec")

    live = set(graph.section_ids)
    for pinned_name in pins:
        if pinned_name not in live:
            raise ParseError(
                f"spec: section '{pinned_name}' pins a config but a transform replaced it",
                field="spec.transforms",
            )
    params_by_section = {
        s.id: costs.get(s.id, _DEFAULT_COST) for s in graph.sections
    }
    # Cost params declared for sections merged away carry over to the merge.
    for s in graph.sections:
        if s.id in costs:
            continue
        donors = [name for name in costs if name in s.submodules or s.id.startswith(f"{name}+")]
        if donors:
            params_by_section[s.id] = costs[sorted(donors)[0]]

    b = _require(m["batch"], "spec.batch")
    _check_keys(b, {"samples", "profile"}, set(), "spec.batch")
    if ("samples" in b) == ("profile" in b):
        raise ParseError("spec.batch: declare exactly one of 'samples' or 'profile'")
    batch: Optional[tuple[SampleTiming, ...]] = None
    profile: Optional[BatchProfile] = None
    if "samples" in b:
        if not isinstance(b["samples"], list) or not b["samples"]:
            raise ParseError("spec.batch.samples: expected a non-empty list")
        batch = tuple(
            _parse_sample(raw, i, f"spec.batch.samples[{i}]") for i, raw in enumerate(b["samples"])
        )
        ids = [s.sample_id for s in batch]
        if len(set(ids)) != len(ids):
            raise ParseError("spec.batch.samples: duplicate sample ids")
        for i, sample in enumerate(batch):
            try:
                graph.resolve_activation(sample)
            except MaestroError as exc:
                raise ParseError(f"spec.batch.samples[{i}]: {exc}")
    else:
        p = _require(b["profile"], "spec.batch.profile")
        _check_keys(p, {"global_batch_size", "shares", "tokens"}, {"global_batch_size"}, "spec.batch.profile")
        shares_raw = _require(p.get("shares", {}), "spec.batch.profile.shares")
        tokens_raw = _require(p.get("tokens", {}), "spec.batch.profile.tokens")
        for sid in list(shares_raw) + list(tokens_raw):
            if sid not in live:
                raise ParseError(
                    f"spec.batch.profile: unknown section '{sid}'", field="spec.batch.profile"
                )
        try:
            profile = BatchProfile(
                global_batch_size=_integer(p["global_batch_size"], "spec.batch.profile.global_batch_size"),
                shares={k: _number(v, f"spec.batch.profile.shares[{k}]") for k, v in shares_raw.items()},
                tokens={k: _integer(v, f"spec.batch.profile.tokens[{k}]") for k, v in tokens_raw.items()},
            )
        except MaestroError as exc:
            raise ParseError(f"spec.batch.profile: {exc}")

    return WorkloadSpec(
        graph=graph,
        cluster=cluster,
        params_by_section=params_by_section,
        pinned=pins,
        batch=batch,
        profile=profile,
        source=source,
    )


def load_spec(path: "str | Path") -> WorkloadSpec:
    """Parse a spec file from disk."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read spec file {p}: {exc}", file=str(p))
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ParseError(f"invalid YAML in {p}{where}: {exc}", file=str(p))
    return parse_spec(doc, source=str(p))
