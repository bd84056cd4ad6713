from contextlib import contextmanager
from typing import Iterator

from celery import Celery
from app.core.config import settings
import logging

logger = logging.getLogger(__name__)

celery_app = Celery(
    "ddmpc",
    broker=settings.CELERY_BROKER_URL,
    backend=settings.CELERY_RESULT_BACKEND,
    include=['app.tasks.solve_tasks']
)


config_dict = {
    'task_serializer': 'json',
    'accept_content': ['json'],
    'result_serializer': 'json',

    'task_always_eager': settings.CELERY_TASK_ALWAYS_EAGER,
    'task_eager_propagates': True,

    'result_expires': 3600,  # 1 hour

    'timezone': 'UTC',
    'enable_utc': True,

    # per-node work shares the dispatching process, so threads rather than prefork
    'worker_pool': 'threads',
    'worker_concurrency': settings.WORKER_CONCURRENCY,
    'worker_prefetch_multiplier': 1,
    'worker_hijack_root_logger': False,

    'broker_transport_options': {'polling_interval': 0.01},
    'broker_connection_retry_on_startup': True,
}

celery_app.conf.update(**config_dict)

logger.debug("Celery application configured")


@contextmanager
def embedded_worker(concurrency: int) -> Iterator[None]:
    """
    Thread-pool worker consuming the in-memory queue of this process

    Only used when eager execution is switched off (DDMPC_CELERY_TASK_ALWAYS_EAGER=false).
    """
    from celery.contrib.testing.worker import start_worker

    logger.info(f"Starting embedded worker with {concurrency} threads")
    with start_worker(
        celery_app,
        concurrency=concurrency,
        pool="threads",
        loglevel=settings.LOG_LEVEL,
        perform_ping_check=False,
    ):
        yield
