import asyncio
import logging
import uuid
from collections import Counter
from datetime import datetime, timedelta
from threading import Lock
from typing import Dict, List, Optional

from app.dtos.dtos import ExperimentConfig, ExperimentJob, JobStatus
from app.exceptions import JobError, JobNotFoundError

logger = logging.getLogger(__name__)


class JobManager:
    """In-memory registry and FIFO queue of experiment jobs for one service process"""
    _instance = None
    _lock = Lock()

    MAX_QUEUE_SIZE = 100
    # a convergence table on the finest grids runs for hours
    JOB_TIMEOUT_MINUTES = 240
    RETENTION_HOURS = 1

    def __new__(cls):
        with cls._lock:
            if cls._instance is None:
                cls._instance = super(JobManager, cls).__new__(cls)
                cls._instance._initialized = False
            return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._jobs: Dict[str, ExperimentJob] = {}
        self._pending: asyncio.Queue = asyncio.Queue(maxsize=self.MAX_QUEUE_SIZE)
        self._registry_lock = asyncio.Lock()
        self._sweeper: Optional[asyncio.Task] = None
        self._initialized = True
        logger.info(f"Experiment job registry ready (queue capacity {self.MAX_QUEUE_SIZE})")

    async def start_cleanup_task(self) -> None:
        if self._sweeper is None or self._sweeper.done():
            self._sweeper = asyncio.create_task(self._sweep_forever())
            logger.info(f"Sweeping finished experiments every {self.RETENTION_HOURS}h")

    async def stop_cleanup_task(self) -> None:
        if self._sweeper is None or self._sweeper.done():
            return
        self._sweeper.cancel()
        try:
            await self._sweeper
        except asyncio.CancelledError:
            pass
        logger.info("Experiment sweeper stopped")

    def _classify(self, job: ExperimentJob, now: datetime) -> Optional[str]:
        """'expired' for finished jobs past retention, 'timed_out' for runs past the timeout"""
        if job.status in (JobStatus.COMPLETED, JobStatus.FAILED):
            if job.completed_at and now - job.completed_at > timedelta(hours=self.RETENTION_HOURS):
                return "expired"
        elif job.status == JobStatus.RUNNING:
            if job.started_at and now - job.started_at > timedelta(minutes=self.JOB_TIMEOUT_MINUTES):
                return "timed_out"
        return None

    async def force_cleanup(self) -> dict:
        """Drop expired finished jobs and fail runs that exceeded the timeout"""
        async with self._registry_lock:
            before = len(self._jobs)
            now = datetime.utcnow()
            removed: Counter = Counter()
            timed_out = 0

            for job_id, job in list(self._jobs.items()):
                try:
                    verdict = self._classify(job, now)
                    if verdict == "expired":
                        removed[job.status] += 1
                        del self._jobs[job_id]
                    elif verdict == "timed_out":
                        job.mark_failed(f"Experiment exceeded {self.JOB_TIMEOUT_MINUTES} minutes")
                        timed_out += 1
                except Exception as e:
                    logger.exception(f"Skipping job {job_id} during cleanup: {e}")

            stats = {
                "initial_job_count": before,
                "final_job_count": len(self._jobs),
                "completed_removed": removed[JobStatus.COMPLETED],
                "failed_removed": removed[JobStatus.FAILED],
                "running_timed_out": timed_out,
            }
            logger.info(f"Experiment cleanup: {stats}")
            return stats

    async def create_job(self, config: ExperimentConfig) -> ExperimentJob:
        try:
            job = ExperimentJob.create_pending(str(uuid.uuid4()), config)
        except Exception as e:
            logger.error(f"Could not register {config.study.value} experiment: {e}")
            raise JobError(f"Failed to create job: {e}") from e
        async with self._registry_lock:
            self._jobs[job.job_id] = job
        logger.info(f"Registered job {job.job_id}: {config.study.value} study of {config.method_tag()}")
        return job

    async def queue_job(self, job: ExperimentJob) -> None:
        try:
            self._pending.put_nowait(job.job_id)
        except asyncio.QueueFull as e:
            logger.error(f"Experiment queue full, rejecting job {job.job_id}")
            raise JobError(f"Experiment queue is full ({self.MAX_QUEUE_SIZE} jobs)") from e
        logger.debug(f"Queued job {job.job_id} ({self._pending.qsize()} waiting)")

    async def get_next_job(self) -> Optional[ExperimentJob]:
        """Oldest queued job that is still pending; None when nothing is waiting"""
        async with self._registry_lock:
            while not self._pending.empty():
                candidate = self._jobs.get(self._pending.get_nowait())
                if candidate is not None and candidate.status == JobStatus.PENDING:
                    return candidate
        return None

    async def get_job(self, job_id: str) -> ExperimentJob:
        async with self._registry_lock:
            if job_id not in self._jobs:
                raise JobNotFoundError(f"Job {job_id} not found")
            return self._jobs[job_id]

    async def get_all_jobs(self, status: Optional[JobStatus] = None) -> List[ExperimentJob]:
        async with self._registry_lock:
            return [job for job in self._jobs.values() if status is None or job.status == status]

    async def _sweep_forever(self) -> None:
        while True:
            try:
                await self.force_cleanup()
                await asyncio.sleep(self.RETENTION_HOURS * 3600)
            except Exception as e:
                logger.exception(f"Experiment sweeper failed: {e}")
                await asyncio.sleep(60)
