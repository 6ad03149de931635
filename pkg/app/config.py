from typing import Optional

from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    PEIFE_WORKERS: int = 1
    QUADRATURE_POINTS: int = 3
    OUTPUT_DIR: str = "results"
    NODAL_SOURCE: bool = False
    LOG_LEVEL: str = "INFO"
    DEBUG: bool = False
    SENTRY_DSN: Optional[str] = None
    ENVIRONMENT: str = "dev"

    model_config = {
        "env_file": ".env",
        "extra": "ignore",
    }

settings = Settings()
