import logging
import platform
import sys
import time
from contextlib import asynccontextmanager
from typing import Optional

import numpy
import scipy
import sentry_sdk
import uvicorn
from fastapi import APIRouter, Depends, FastAPI, Request, Response, status
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.config import settings
from app.dtos.dtos import ExperimentConfig, ExperimentJob, JobStatus, JobStatusResponse
from app.exceptions import (
    GridError, JobError, PararealError, ProblemError, SolverError, SpectralError, StudyError, WeightError,
    get_root_cause_message,
)
from app.services.experiment_worker import ExperimentWorker
from app.services.job_manager import JobManager

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format='%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(funcName)s:%(lineno)d - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)

logger = logging.getLogger(__name__)

SERVICE_VERSION = "1.0.0"


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"PEIFE experiment service {SERVICE_VERSION} on Python {sys.version.split()[0]}, "
                f"{platform.system()} {platform.release()}")
    logger.info(f"numpy {numpy.__version__}, scipy {scipy.__version__}, "
                f"{settings.PEIFE_WORKERS} fine sweep worker(s) by default, output in {settings.OUTPUT_DIR}/")

    if settings.SENTRY_DSN:
        sentry_sdk.init(
            dsn=settings.SENTRY_DSN,
            traces_sample_rate=1.0,
            environment=settings.ENVIRONMENT,
            release=f"peife@{SERVICE_VERSION}"
        )

    registry = JobManager()
    worker = ExperimentWorker(registry)
    await registry.start_cleanup_task()
    await worker.start_worker()

    yield

    await worker.stop_worker()
    await registry.stop_cleanup_task()


app = FastAPI(lifespan=lifespan, title="PEIFE Experiment Service", version=SERVICE_VERSION)
api_router = APIRouter()


@app.exception_handler(RequestValidationError)
async def request_validation_handler(request: Request, exc: RequestValidationError):
    logger.warning(f"Rejected {request.method} {request.url.path}: {get_root_cause_message(exc)}")
    return JSONResponse(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, content={"detail": exc.errors()})


def _register_solver_handler(error_type: type, kind: str) -> None:
    async def handler(request: Request, exc: SolverError):
        if exc.status_code >= 500:
            logger.exception(f"{kind} failure on {request.url.path}: {get_root_cause_message(exc)}")
        else:
            logger.warning(f"{kind} error on {request.url.path}: {exc}")
        return JSONResponse(status_code=exc.status_code, content={"detail": str(exc)})

    app.add_exception_handler(error_type, handler)


for _error_type, _kind in (
        (StudyError, "Study"),
        (ProblemError, "Problem"),
        (JobError, "Job"),
        (PararealError, "Parareal"),
        (GridError, "Grid"),
        (SpectralError, "Spectral"),
        (WeightError, "Weight"),
):
    _register_solver_handler(_error_type, _kind)


@app.exception_handler(Exception)
async def unhandled_error_handler(request: Request, exc: Exception):
    logger.exception(f"Unhandled error on {request.url.path}: {get_root_cause_message(exc)}")
    return JSONResponse(status_code=500, content={"detail": "An unexpected error occurred"})


app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.middleware("http")
async def log_requests(request: Request, call_next):
    started = time.perf_counter()
    response = await call_next(request)
    logger.info(f"{request.method} {request.url.path} -> {response.status_code} "
                f"in {time.perf_counter() - started:.2f}s")
    return response


@api_router.get('/', status_code=200)
async def alive():
    return Response(content="I am alive", status_code=status.HTTP_200_OK)


@api_router.get('/health', status_code=200)
async def health():
    return Response(content="OK", status_code=status.HTTP_200_OK)


@api_router.post('/v1/experiments', response_model=ExperimentJob)
async def submit_experiment(
        config: ExperimentConfig,
        worker: ExperimentWorker = Depends(ExperimentWorker.get_instance)
):
    """Queue an experiment; poll the returned job for its result rows"""
    # body parsing bypasses __init__, so the cross-field checks run here
    checked = ExperimentConfig(**config.model_dump())
    return await worker.submit(checked)


@api_router.get('/v1/experiments', response_model=JobStatusResponse)
async def list_experiments(
        status_filter: Optional[JobStatus] = None,
        registry: JobManager = Depends(JobManager)
):
    return JobStatusResponse(jobs=await registry.get_all_jobs(status_filter))


@api_router.get('/v1/experiments/{job_id}', response_model=ExperimentJob)
async def get_experiment(
        job_id: str,
        registry: JobManager = Depends(JobManager)
):
    return await registry.get_job(job_id)


@api_router.post('/v1/debug/force-cleanup', response_model=dict)
async def force_cleanup(registry: JobManager = Depends(JobManager)):
    """Drop expired experiments and fail timed-out runs now"""
    return await registry.force_cleanup()


app.include_router(api_router)

if __name__ == "__main__":
    uvicorn.run(app, host="0.0.0.0", port=80)
