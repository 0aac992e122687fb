"""Parametric cost model: per-section step time and per-GPU memory.

A deliberately simple roofline-style estimator.  Everything is an explicit
parameter so users can calibrate against real hardware; the shipped presets
are calibrations, not ground truth.  Pipeline parallelism shards memory but
does not change per-micro-batch compute time here; its fill/drain cost enters
when a batch is derived (see `derive_batch`).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .errors import EmptyBatch, InvalidConfig, InvalidDims
from .workload import (
    SectionConfig,
    SectionGraph,
    SectionId,
    SectionSpec,
    SampleTiming,
    Side,
)


@dataclass(frozen=True)
class CostParams:
    """Knobs of the analytic time/memory model for one section.

    parallel_efficiency maps (tp, pp, cp) to a factor in (0, 1]; degrees not
    listed default to 1.0.  mbs_efficiency models small-batch kernel
    inefficiency (throughput ramps as mbs grows); unlisted sizes default to
    1.0 and (1,1,1) efficiency is pinned to 1 by contract.
    """

    flops_per_token_fwd: float
    peak_flops_per_gpu: float
    bwd_fwd_ratio: float = 2.0
    parallel_efficiency: Mapping[tuple[int, int, int], float] = field(default_factory=dict)
    mbs_efficiency: Mapping[int, float] = field(default_factory=dict)
    bytes_per_param_weights: float = 2.0
    bytes_per_param_optimizer: float = 12.0
    activation_bytes_per_token: float = 0.0
    live_microbatch_cap: float = 4.0

    def __post_init__(self) -> None:
        if self.flops_per_token_fwd <= 0 or self.peak_flops_per_gpu <= 0:
            raise InvalidDims("flops_per_token_fwd and peak_flops_per_gpu must be positive")
        if self.bwd_fwd_ratio <= 0:
            raise InvalidDims("bwd_fwd_ratio must be positive")
        if self.bytes_per_param_weights <= 0:
            raise InvalidDims("bytes_per_param_weights must be positive")
        if self.bytes_per_param_optimizer < 0 or self.activation_bytes_per_token < 0:
            raise InvalidDims("byte counts must be nonnegative")
        if self.parallel_efficiency.get((1, 1, 1), 1.0) != 1.0:
            raise InvalidDims("parallel_efficiency(1,1,1) must be 1")
        for key, eff in self.parallel_efficiency.items():
            if not 0 < eff <= 1:
                raise InvalidDims(f"parallel_efficiency{key} must lie in (0,1]")
        for mbs, eff in self.mbs_efficiency.items():
            if not 0 < eff <= 1:
                raise InvalidDims(f"mbs_efficiency[{mbs}] must lie in (0,1]")

    def efficiency(self, config: SectionConfig) -> float:
        par = self.parallel_efficiency.get((config.tp, config.pp, config.cp), 1.0)
        return par * self.mbs_efficiency.get(config.mbs, 1.0)


@dataclass(frozen=True)
class MemoryEstimate:
    """Per-GPU memory, in bytes, split by component."""

    weights: float
    optimizer_state: float
    gradients: float
    activations: float

    @property
    def total(self) -> float:
        return self.weights + self.optimizer_state + self.gradients + self.activations

    def as_dict(self) -> dict[str, float]:
        return {
            "weights": self.weights,
            "optimizer_state": self.optimizer_state,
            "gradients": self.gradients,
            "activations": self.activations,
            "total": self.total,
        }


def _check_config(section: SectionSpec, config: SectionConfig) -> None:
    if not config.divides(section.structural):
        raise InvalidConfig(
            f"config tp={config.tp} pp={config.pp} cp={config.cp} does not divide "
            f"section '{section.id}' structural params "
            f"(heads={section.structural.num_heads}, layers={section.structural.num_layers}, "
            f"seq={section.structural.max_seq_len})",
            section=section.id,
        )


def estimate_step_time(
    section: SectionSpec,
    config: SectionConfig,
    params: CostParams,
    tokens_per_sample: int,
) -> tuple[float, float]:
    """(forward, backward) time for one micro-batch of `config.mbs` samples.

    forward = mbs * tokens * flops / (peak * tp * cp * efficiency); backward
    is the fixed ratio, or zero for forward-only sections.
    """
    _check_config(section, config)
    if tokens_per_sample <= 0:
        raise InvalidDims("tokens_per_sample must be positive")
    flops = config.mbs * tokens_per_sample * params.flops_per_token_fwd
    effective = params.peak_flops_per_gpu * config.tp * config.cp * params.efficiency(config)
    forward = flops / effective
    backward = 0.0 if section.forward_only else forward * params.bwd_fwd_ratio
    return forward, backward


def estimate_memory(
    section: SectionSpec,
    config: SectionConfig,
    params: CostParams,
    tokens_per_sample: int,
) -> MemoryEstimate:
    """Per-GPU memory for one section under one config.

    Weights and optimizer state shard over tp*pp; activations over tp*cp.
    Forward-only sections keep no optimizer state or gradients, and their
    live activation set is capped at `live_microbatch_cap` micro-batches
    (nothing is stashed for a backward pass).
    """
    _check_config(section, config)
    if tokens_per_sample <= 0:
        raise InvalidDims("tokens_per_sample must be positive")
    shard = config.tp * config.pp
    weights = section.structural.param_count * params.bytes_per_param_weights / shard
    if section.forward_only:
        optimizer_state = 0.0
        gradients = 0.0
        live_mbs = min(config.mbs, params.live_microbatch_cap)
    else:
        optimizer_state = section.structural.param_count * params.bytes_per_param_optimizer / shard
        gradients = weights
        live_mbs = float(config.mbs)
    activations = (
        live_mbs * tokens_per_sample * params.activation_bytes_per_token / (config.tp * config.cp)
    )
    return MemoryEstimate(
        weights=weights,
        optimizer_state=optimizer_state,
        gradients=gradients,
        activations=activations,
    )


def section_iteration_time(
    section: SectionSpec,
    config: SectionConfig,
    params: CostParams,
    tokens_per_sample: int,
    samples_per_rank: int,
) -> float:
    """Time for one DP rank to process its per-iteration share of samples.

    m = ceil(samples / mbs) micro-batches through a pp-deep pipeline:
    (m + pp - 1) * t_mb / pp, the usual fill/drain-inclusive form.
    """
    if samples_per_rank <= 0:
        return 0.0
    fwd, bwd = estimate_step_time(section, config, params, tokens_per_sample)
    m = math.ceil(samples_per_rank / config.mbs)
    return (m + config.pp - 1) * (fwd + bwd) / config.pp


def per_sample_times(
    section: SectionSpec,
    config: SectionConfig,
    params: CostParams,
    tokens_per_sample: int,
    samples_per_rank: int,
) -> tuple[float, float]:
    """(forward, backward) per-sample times with fill/drain amortized in.

    Spreads the (pp - 1) fill/drain stage times evenly over the rank's
    samples so that a sample-granular simulation reproduces
    `section_iteration_time` in aggregate.
    """
    if samples_per_rank <= 0:
        return 0.0, 0.0
    fwd, bwd = estimate_step_time(section, config, params, tokens_per_sample)
    m = math.ceil(samples_per_rank / config.mbs)
    scale = (m + config.pp - 1) / (m * config.pp * config.mbs)
    return fwd * scale, bwd * scale


# --- batch synthesis ----------------------------------------------------------


@dataclass(frozen=True)
class BatchProfile:
    """Statistical description of a global batch when explicit samples are absent.

    shares maps auxiliary section id -> fraction of samples activating it;
    tokens maps section id -> tokens each sample occupies there (defaults to
    the section's max_seq_len).
    """

    global_batch_size: int
    shares: Mapping[SectionId, float] = field(default_factory=dict)
    tokens: Mapping[SectionId, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.global_batch_size < 1:
            raise EmptyBatch("global_batch_size must be positive")
        for sid, share in self.shares.items():
            if not 0 <= share <= 1:
                raise InvalidDims(f"share for '{sid}' must lie in [0,1]", section=sid)

    def tokens_for(self, section: SectionSpec) -> int:
        return int(self.tokens.get(section.id, section.structural.max_seq_len))


def derive_batch(
    graph: SectionGraph,
    configs: Mapping[SectionId, SectionConfig],
    params_by_section: Mapping[SectionId, CostParams],
    profile: BatchProfile,
    seed: int = 0,
) -> list[SampleTiming]:
    """Synthesize a global batch of 6-tuple samples from the cost model.

    Activation membership per auxiliary is the rounded share of the batch,
    assigned by a seeded shuffle; per-sample times come from each section's
    config with pipeline fill/drain amortized (see `per_sample_times`).
    """
    critical = graph.critical
    b = profile.global_batch_size
    rng = random.Random(seed)

    member: dict[SectionId, set[int]] = {}
    for aux in graph.auxiliaries:
        share = profile.shares.get(aux.id, 0.0)
        count = min(b, round(share * b))
        ids = list(range(b))
        rng.shuffle(ids)
        member[aux.id] = set(ids[:count])

    times: dict[SectionId, tuple[float, float]] = {}
    crit_cfg = configs[critical.id]
    n_crit = math.ceil(b / crit_cfg.dp)
    times[critical.id] = per_sample_times(
        critical, crit_cfg, params_by_section[critical.id],
        profile.tokens_for(critical), n_crit,
    )
    for aux in graph.auxiliaries:
        cfg = configs[aux.id]
        activated = len(member[aux.id])
        n_aux = math.ceil(activated / cfg.dp) if activated else 0
        times[aux.id] = per_sample_times(
            aux, cfg, params_by_section[aux.id], profile.tokens_for(aux), n_aux,
        )

    samples: list[SampleTiming] = []
    for i in range(b):
        t = {phase: 0.0 for phase in ("f_bc", "f_c", "f_ac", "b_bc", "b_c", "b_ac")}
        fwd_c, bwd_c = times[critical.id]
        t["f_c"], t["b_c"] = fwd_c, bwd_c
        activated: set[str] = set()
        for aux in graph.auxiliaries:
            if i not in member[aux.id]:
                continue
            fwd, bwd = times[aux.id]
            if graph.side(aux.id) is Side.UPSTREAM:
                t["f_bc"] += fwd
                t["b_ac"] += bwd
            else:
                t["f_ac"] += fwd
                t["b_bc"] += bwd
            activated.add(aux.id)
        samples.append(
            SampleTiming(
                sample_id=i,
                t_f_bc=t["f_bc"],
                t_f_c=t["f_c"],
                t_f_ac=t["f_ac"],
                t_b_bc=t["b_bc"],
                t_b_c=t["b_c"],
                t_b_ac=t["b_ac"],
                activated_sections=frozenset(activated),
            )
        )
    return samples


# --- shipped presets ----------------------------------------------------------

# Calibrations for the documented workload archetypes.  The frozen-teacher
# mbs ramp is fitted so throughput(mbs=4)/throughput(mbs=1) = 0.91/0.35 = 2.6.
PRESETS: dict[str, CostParams] = {
    "vit-encoder": CostParams(
        flops_per_token_fwd=2.4e9,
        peak_flops_per_gpu=3.0e14,
        bwd_fwd_ratio=2.0,
        parallel_efficiency={
            (1, 1, 2): 0.97,
            (1, 1, 4): 0.93,
            (1, 1, 8): 0.88,
            (1, 1, 16): 0.80,
            (2, 1, 1): 0.95,
            (2, 1, 2): 0.92,
            (2, 1, 4): 0.88,
            (4, 1, 1): 0.90,
        },
        bytes_per_param_weights=2.0,
        bytes_per_param_optimizer=12.0,
        activation_bytes_per_token=4096.0,
    ),
    "moe-backbone": CostParams(
        flops_per_token_fwd=3.4e10,
        peak_flops_per_gpu=3.0e14,
        bwd_fwd_ratio=2.0,
        parallel_efficiency={
            (2, 1, 1): 0.96,
            (4, 1, 1): 0.92,
            (8, 1, 1): 0.85,
            (2, 2, 1): 0.93,
            (4, 2, 1): 0.89,
            (4, 4, 1): 0.84,
            (8, 2, 1): 0.82,
            (8, 4, 1): 0.78,
            (2, 1, 2): 0.92,
            (4, 1, 2): 0.88,
            (2, 2, 2): 0.89,
        },
        bytes_per_param_weights=2.0,
        bytes_per_param_optimizer=12.0,
        activation_bytes_per_token=24576.0,
    ),
    "frozen-teacher": CostParams(
        flops_per_token_fwd=5.6e10,
        peak_flops_per_gpu=3.0e14,
        bwd_fwd_ratio=2.0,
        parallel_efficiency={
            (2, 1, 1): 0.96,
            (4, 1, 1): 0.92,
            (8, 1, 1): 0.86,
            (2, 2, 1): 0.93,
            (4, 2, 1): 0.88,
            (1, 1, 2): 0.93,
            (1, 1, 4): 0.88,
            (2, 1, 2): 0.90,
        },
        mbs_efficiency={1: 0.35, 2: 0.62, 3: 0.80, 4: 0.91, 8: 1.0},
        bytes_per_param_weights=2.0,
        bytes_per_param_optimizer=0.0,
        activation_bytes_per_token=1024.0,
    ),
}


def preset(name: str) -> CostParams:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise InvalidDims(f"unknown cost preset '{name}' (known: {known})", preset=name)
