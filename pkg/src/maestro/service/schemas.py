"""Request/response models for the planning service."""

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field

from ..pipeline import RunOptions
from ..scheduling import ExecPolicy


class Options(BaseModel):
    policy: Literal["interleaved", "all-fwd-then-bwd"] = "interleaved"
    comm: str = "zero"
    cp_cap: int = Field(default=16, ge=1)
    seed: int = Field(default=0, ge=0)
    aux_execution: Literal["merged", "earliest-ready"] = "merged"
    critical_gpu_budget: Optional[int] = Field(default=None, ge=1)

    def to_run_options(self) -> RunOptions:
        return RunOptions(
            policy=ExecPolicy.parse(self.policy),
            comm=self.comm,
            cp_cap=self.cp_cap,
            seed=self.seed,
            aux_execution=self.aux_execution,
            critical_gpu_budget=self.critical_gpu_budget,
        )


class SpecRequest(BaseModel):
    spec: dict[str, Any]
    options: Options = Options()


class SimulateRequest(BaseModel):
    spec: dict[str, Any]
    plan: dict[str, Any]
    schedule: dict[str, Any]
    options: Options = Options()


class Diagnostic(BaseModel):
    code: str
    where: str
    message: str


class ValidateResponse(BaseModel):
    valid: bool
    diagnostics: list[Diagnostic]


class OptimizeResponse(BaseModel):
    plan: dict[str, Any]


class ScheduleResponse(BaseModel):
    plan: dict[str, Any]
    schedule: dict[str, Any]
    summary: dict[str, Any]


class SimulateResponse(BaseModel):
    report: dict[str, Any]
    trace: dict[str, Any]


class End2EndResponse(BaseModel):
    plan: dict[str, Any]
    schedule: dict[str, Any]
    summary: dict[str, Any]
    report: dict[str, Any]
    trace: dict[str, Any]


class ErrorResponse(BaseModel):
    error: str
    stage: str
    message: str
    context: dict[str, Any] = {}


class HealthResponse(BaseModel):
    status: str
    version: str
