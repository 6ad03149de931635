from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from app.dtos.numerics import SpectralField
from app.exceptions import ExperimentConfigError, InvalidJobStateError, InvalidPararealRunError


class StudyAxis(str, Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    PARAREAL_TRACE = "parareal-trace"
    SINGLE_RUN = "single-run"
    PERF = "perf"
    SPEEDUP = "speedup"


class Scheme(str, Enum):
    EIFE = "eife"
    PEIFE = "peife"


class PararealRun(BaseModel):
    """Parareal parameters: N coarse intervals, M fine substeps, p/q stages"""
    coarse_intervals: int
    fine_steps: int
    coarse_stages: int
    fine_stages: int
    k_max: Optional[int] = 4
    tol: float = 0.0
    record_trace: bool = True
    trace_retention: Literal["last", "full"] = "full"
    workers: int = 1

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if self.coarse_intervals < 1 or self.fine_steps < 1:
            raise InvalidPararealRunError(
                f"N and M must be positive, got N={self.coarse_intervals}, M={self.fine_steps}"
            )
        if not 1 <= self.coarse_stages <= self.fine_stages:
            raise InvalidPararealRunError(
                f"Stage counts must satisfy 1 <= p <= q, got p={self.coarse_stages}, q={self.fine_stages}"
            )
        if self.k_max is not None and self.k_max < 0:
            raise InvalidPararealRunError(f"Iteration budget must be non-negative, got {self.k_max}")
        if self.tol < 0:
            raise InvalidPararealRunError(f"Tolerance must be non-negative, got {self.tol}")
        if self.k_max is None and self.tol == 0:
            raise InvalidPararealRunError("An iteration budget or a positive tolerance is required")
        if self.workers < 1:
            raise InvalidPararealRunError(f"Worker count must be positive, got {self.workers}")

    @property
    def total_steps(self) -> int:
        return self.coarse_intervals * self.fine_steps

    def method_tag(self) -> str:
        return f"PEIFE-p{self.coarse_stages}q{self.fine_stages}"


class IterationRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    iteration: int
    checkpoints: Optional[List[SpectralField]] = None
    increment: Optional[float] = None
    l2_error: Optional[float] = None
    linf_error: Optional[float] = None
    l2_vs_fine: Optional[float] = None
    linf_vs_fine: Optional[float] = None
    coarse_seconds: float = 0.0
    fine_seconds: float = 0.0
    correction_seconds: float = 0.0

    @property
    def wall_seconds(self) -> float:
        return self.coarse_seconds + self.fine_seconds + self.correction_seconds


class IterationTrace(BaseModel):
    records: List[IterationRecord] = Field(default_factory=list)

    @property
    def iterations(self) -> int:
        """Number of corrections performed (records minus the k = 0 predictor)"""
        return max(len(self.records) - 1, 0)

    def mean_iteration_seconds(self) -> float:
        corrections = self.records[1:]
        if not corrections:
            return 0.0
        return sum(r.wall_seconds for r in corrections) / len(corrections)


class ExperimentConfig(BaseModel):
    study: StudyAxis = StudyAxis.SINGLE_RUN
    problem: str = "ex1d"
    problem_params: Dict[str, float] = Field(default_factory=dict)
    scheme: Scheme = Scheme.PEIFE
    cells: List[Union[int, List[int]]] = Field(default_factory=lambda: [8])
    coarse_intervals: List[int] = Field(default_factory=lambda: [4])
    fine_steps: List[int] = Field(default_factory=lambda: [1])
    p: int = 2
    q: int = 2
    k_max: Optional[int] = 4
    tol: float = 0.0
    workers: Optional[int] = None
    quadrature_points: Optional[int] = None
    output_dir: Optional[str] = None
    snapshot_times: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    trace_retention: Literal["last", "full"] = "full"
    source_mode: Literal["projection", "nodal"] = "projection"
    reference: Literal["exact", "self"] = "exact"
    seed: Optional[int] = None

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        for name in ("cells", "coarse_intervals", "fine_steps"):
            if not getattr(self, name):
                raise ExperimentConfigError(f"'{name}' must list at least one value")
        if any(n < 1 for n in self.coarse_intervals + self.fine_steps):
            raise ExperimentConfigError("Step counts must be positive")
        if self.study == StudyAxis.SPATIAL or self.study == StudyAxis.PERF:
            totals = [_node_total(c) for c in self.cells]
            if any(b <= a for a, b in zip(totals, totals[1:])):
                raise ExperimentConfigError(f"Grid refinement list must be strictly increasing, got {self.cells}")
        if self.study == StudyAxis.TEMPORAL:
            steps = self.temporal_levels()
            totals = [n * m for n, m in steps]
            if any(b <= a for a, b in zip(totals, totals[1:])):
                raise ExperimentConfigError(
                    f"Time refinement list must be strictly increasing, got {[f'{n}x{m}' for n, m in steps]}"
                )
        if self.p < 1 or self.q < 1:
            raise ExperimentConfigError("Stage counts must be positive")
        if (self.study in (StudyAxis.PARAREAL_TRACE, StudyAxis.PERF, StudyAxis.SPEEDUP)
                and self.scheme != Scheme.PEIFE):
            raise ExperimentConfigError(f"The {self.study.value} study measures Parareal runs; use scheme 'peife'")
        if self.scheme == Scheme.PEIFE and self.p > self.q:
            raise ExperimentConfigError(f"Coarse stages p={self.p} may not exceed fine stages q={self.q}")

    def temporal_levels(self):
        """Pairs (N, M), broadcasting a single-entry list against the other"""
        n_list, m_list = self.coarse_intervals, self.fine_steps
        if len(n_list) == 1:
            n_list = n_list * len(m_list)
        if len(m_list) == 1:
            m_list = m_list * len(n_list)
        if len(n_list) != len(m_list):
            raise ExperimentConfigError(
                f"coarse_intervals and fine_steps lengths differ: {len(n_list)} vs {len(m_list)}"
            )
        return list(zip(n_list, m_list))

    def method_tag(self) -> str:
        if self.scheme == Scheme.EIFE:
            return f"EIFE-s{self.q}"
        return f"PEIFE-p{self.p}q{self.q}"


def _node_total(cells: Union[int, List[int]]) -> int:
    if isinstance(cells, int):
        return cells
    total = 1
    for c in cells:
        total *= c
    return total


class ResultRow(BaseModel):
    """One line of a convergence table; errors are empty when nothing to compare against"""
    method: str
    steps: str
    grid: str
    l2_error: Optional[float] = Field(default=None, ge=0.0)
    linf_error: Optional[float] = Field(default=None, ge=0.0)
    rate: Optional[float] = None
    wall_seconds: float = Field(ge=0.0)


class JobStatus(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


class ExperimentJob(BaseModel):
    job_id: str
    config: ExperimentConfig
    status: JobStatus
    created_at: datetime
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None
    error_message: Optional[str] = None
    # records of the study table, keyed by CSV column
    rows: Optional[List[Dict[str, Any]]] = None
    output_files: List[str] = Field(default_factory=list)

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        """Validate the current state is consistent"""
        if self.status == JobStatus.COMPLETED and self.rows is None:
            raise ValueError("Completed jobs must have result rows")

        if self.status == JobStatus.FAILED and not self.error_message:
            raise ValueError("Failed jobs must have an error message")

        if self.rows is not None and self.status != JobStatus.COMPLETED:
            raise ValueError("Result rows can only be present for completed jobs")

        if self.error_message and self.status != JobStatus.FAILED:
            raise ValueError("Error message can only be present for failed jobs")

    def mark_running(self) -> None:
        if self.status != JobStatus.PENDING:
            raise InvalidJobStateError(f"Cannot mark job as running from state {self.status}")
        self.status = JobStatus.RUNNING
        self.started_at = datetime.utcnow()
        self._validate_state()

    def mark_completed(self, rows: List[Dict[str, Any]], output_files: List[str]) -> None:
        if self.status != JobStatus.RUNNING:
            raise InvalidJobStateError(f"Cannot mark job as completed from state {self.status}")
        self.status = JobStatus.COMPLETED
        self.completed_at = datetime.utcnow()
        self.rows = rows
        self.output_files = output_files
        self._validate_state()

    def mark_failed(self, error_message: str) -> None:
        if self.status not in {JobStatus.PENDING, JobStatus.RUNNING}:
            raise InvalidJobStateError(f"Cannot mark job as failed from state {self.status}")
        if not error_message:
            raise ValueError("Must provide error message when failing job")
        self.status = JobStatus.FAILED
        self.completed_at = datetime.utcnow()
        self.error_message = error_message
        self.rows = None
        self._validate_state()

    @classmethod
    def create_pending(cls, job_id: str, config: ExperimentConfig) -> 'ExperimentJob':
        return cls(
            job_id=job_id,
            config=config,
            status=JobStatus.PENDING,
            created_at=datetime.utcnow()
        )


class JobStatusResponse(BaseModel):
    jobs: List[ExperimentJob]
