import asyncio
import logging
from typing import Optional
from threading import Lock

from app.dtos.dtos import ExperimentConfig, ExperimentJob, JobStatus
from app.exceptions import SolverError, get_root_cause_message
from app.services.experiments import ExperimentRunner
from app.services.job_manager import JobManager

logger = logging.getLogger(__name__)


class ExperimentWorker:
    """Runs queued experiment jobs one at a time off the event loop"""
    _instance = None
    _lock = Lock()

    POLL_SECONDS = 1

    def __new__(cls, job_manager: Optional[JobManager] = None):
        with cls._lock:
            if cls._instance is None:
                cls._instance = super(ExperimentWorker, cls).__new__(cls)
                cls._instance._initialized = False
            return cls._instance

    def __init__(self, job_manager: Optional[JobManager] = None):
        if not self._initialized:
            self.job_manager = job_manager or JobManager()
            self._worker_task: Optional[asyncio.Task] = None
            self._initialized = True

    @staticmethod
    def get_instance() -> 'ExperimentWorker':
        return ExperimentWorker()

    async def start_worker(self) -> None:
        """Start the background worker if not already running"""
        if self._worker_task is None or self._worker_task.done():
            self._worker_task = asyncio.create_task(self._process_jobs())
            logger.info("Started experiment worker")

    async def stop_worker(self) -> None:
        """Stop the background worker"""
        if self._worker_task and not self._worker_task.done():
            self._worker_task.cancel()
            try:
                await self._worker_task
            except asyncio.CancelledError:
                pass
            logger.info("Stopped experiment worker")

    async def submit(self, config: ExperimentConfig) -> ExperimentJob:
        job = await self.job_manager.create_job(config)
        await self.job_manager.queue_job(job)
        await self.start_worker()
        return job

    async def _process_jobs(self) -> None:
        while True:
            try:
                job = await self.job_manager.get_next_job()
                if job:
                    await self.process_job(job)
                else:
                    await asyncio.sleep(self.POLL_SECONDS)
            except Exception as e:
                logger.exception(f"Error in experiment loop: {str(e)}")
                await asyncio.sleep(self.POLL_SECONDS)

    async def process_job(self, job: ExperimentJob) -> ExperimentJob:
        """Run one job in a worker thread and record its outcome on the job"""
        logger.info(f"Processing job {job.job_id}")
        job.mark_running()
        try:
            rows, files = await asyncio.to_thread(self._run, job.config)
        except SolverError as e:
            logger.error(f"Experiment error for job {job.job_id}: {get_root_cause_message(e)}")
            if self._still_running(job):
                job.mark_failed(str(e))
        except Exception as e:
            logger.exception(f"Unexpected error processing job {job.job_id}")
            if self._still_running(job):
                job.mark_failed(f"Unexpected error during experiment: {str(e)}")
        else:
            if self._still_running(job):
                job.mark_completed(rows, files)
                logger.info(f"Successfully completed job {job.job_id}")
        return job

    @staticmethod
    def _still_running(job: ExperimentJob) -> bool:
        # the cleanup sweep fails runs past the timeout while their thread keeps going
        if job.status != JobStatus.RUNNING:
            logger.warning(f"Job {job.job_id} finished after it was marked {job.status.value}; "
                           f"keeping '{job.error_message}'")
            return False
        return True

    @staticmethod
    def _run(config: ExperimentConfig):
        return ExperimentRunner(config).run()
