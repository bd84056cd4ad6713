from typing import List

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Application settings
    APP_NAME: str = "Data-driven distributed MPC"
    LOG_LEVEL: str = "INFO"

    # Solver configuration
    QP_SOLVER: str = "CLARABEL"
    SDP_SOLVER: str = "CLARABEL"
    SOLVER_FALLBACKS: List[str] = ["SCS"]
    SOLVER_VERBOSE: bool = False

    # Numerical tolerances
    RANK_TOL: float = 1e-9
    SIM_TOL: float = 1e-8
    CHECK_TOL: float = 1e-6

    # Data collection
    PE_RETRY_CAP: int = 5

    # Celery queue for per-agent solves and per-node synthesis
    # Eager tasks run in-process, so a local run needs no broker
    CELERY_BROKER_URL: str = "memory://"
    CELERY_RESULT_BACKEND: str = "cache+memory://"
    CELERY_TASK_ALWAYS_EAGER: bool = True
    WORKER_CONCURRENCY: int = 1
    TASK_TIMEOUT: float = 600.0

    class Config:
        env_file = '.env'
        env_prefix = 'DDMPC_'
        extra = 'ignore'


settings = Settings()
