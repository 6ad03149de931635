class SolverError(Exception):
    """Base exception for every error raised by the solver stack"""
    status_code = 500


class GridError(SolverError):
    """Base exception for mesh and finite element errors"""
    status_code = 400

class InvalidGridError(GridError):
    """Raised when domain bounds or node counts are inconsistent"""
    status_code = 400

class InvalidDirectionError(GridError):
    """Raised when a direction index is outside 1..dim"""
    status_code = 400

class NonFiniteValueError(GridError):
    """Raised when a field or a sampled function holds NaN/Inf"""
    status_code = 422

    def __init__(self, message, coordinates=None):
        self.coordinates = coordinates
        if coordinates is not None:
            message = f"{message} at {coordinates}"
        super().__init__(message)


class SpectralError(SolverError):
    """Base exception for spectral basis and transform errors"""
    status_code = 500

class InvalidDiffusionError(SpectralError):
    """Raised when the diffusion coefficient is not positive"""
    status_code = 400

class FieldMismatchError(SpectralError):
    """Raised when a field does not belong to the grid it is used with"""
    status_code = 400


class WeightError(SolverError):
    """Base exception for phi-function and weight evaluation errors"""
    status_code = 500

class InvalidStageNodesError(WeightError):
    """Raised when interpolation nodes are unsorted, repeated or outside [0, 1]"""
    status_code = 400

class InvalidPhiOrderError(WeightError):
    """Raised when a phi-function order or argument is out of range"""
    status_code = 400

class InvalidStepError(WeightError):
    """Raised when a step size is not strictly positive"""
    status_code = 400


class PararealError(SolverError):
    """Base exception for Parareal orchestration errors"""
    status_code = 500

class InvalidPararealRunError(PararealError):
    """Raised when the Parareal run parameters are inconsistent"""
    status_code = 400

class PararealWorkerError(PararealError):
    """Raised when a fine sweep fails inside the worker pool"""
    status_code = 500

    def __init__(self, interval, message):
        self.interval = interval
        super().__init__(f"Fine sweep failed on coarse interval {interval}: {message}")


class ProblemError(SolverError):
    """Base exception for problem definition errors"""
    status_code = 500

class UnknownProblemError(ProblemError):
    """Raised when a problem label is not registered"""
    status_code = 404

class InvalidProblemParameterError(ProblemError):
    """Raised when a problem parameter is out of range"""
    status_code = 400

class IncompatibleProblemError(ProblemError):
    """Raised when initial data, exact solution and boundary conditions disagree"""
    status_code = 422


class StudyError(SolverError):
    """Base exception for experiment orchestration errors"""
    status_code = 500

class MissingExactSolutionError(StudyError):
    """Raised when a study needs an exact solution the problem does not have"""
    status_code = 422

class ExperimentConfigError(StudyError):
    """Raised when an experiment configuration is invalid"""
    status_code = 400

class SnapshotTimeError(StudyError):
    """Raised when a snapshot time lies outside the simulated window"""
    status_code = 400


class JobError(SolverError):
    """Base exception for experiment job errors"""
    status_code = 500

class JobNotFoundError(JobError):
    """Raised when a job ID cannot be found"""
    status_code = 404

class InvalidJobStateError(JobError):
    """Raised when an operation is attempted on a job in the wrong state"""
    status_code = 400


def get_root_cause_message(e):
    # Traverse down the chain of causes to find the root cause
    root_cause = e
    while root_cause.__cause__ is not None:
        root_cause = root_cause.__cause__

    return str(root_cause)


def get_error_details(error: Exception) -> dict:
    """Get detailed error information for logging and response"""
    return {
        "error_type": error.__class__.__name__,
        "message": str(error),
        "status_code": getattr(error, "status_code", 500)
    }
