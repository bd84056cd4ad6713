from dataclasses import dataclass, field
from threading import Lock
from typing import Any, Callable, Dict, Iterable, Optional, TypeVar
from uuid import uuid4

from app.core.celery_app import celery_app, embedded_worker
from app.core.config import settings
from app.core.errors import DdmpcError
import logging

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class NodeBatch:
    """Work of one round: the per-node callable and what it produced"""
    work: Callable[[int], Any]
    label: str
    results: Dict[int, Any] = field(default_factory=dict)
    errors: Dict[int, Exception] = field(default_factory=dict)


# Batches live in the dispatching process; task messages only carry (batch_id, node)
_batches: Dict[str, NodeBatch] = {}
_batches_lock = Lock()


@celery_app.task(name="ddmpc.run_node")
def run_node(batch_id: str, node: int) -> Dict[str, Any]:
    """
    Run one node's share of a batch and keep its result in the batch

    Args:
        batch_id: Key of the registered batch
        node: Node id

    Returns:
        dict: Task result with node and status
    """
    with _batches_lock:
        batch = _batches.get(batch_id)
    if batch is None:
        raise DdmpcError("Unknown task batch", {"batch": batch_id, "node": node})

    try:
        batch.results[node] = batch.work(node)
        return {"node": node, "status": "completed"}
    except DdmpcError as e:
        batch.errors[node] = e
        logger.warning(f"{batch.label} failed for node {node}: {e.message}")
        return {"node": node, "status": "failed", "error": e.message}
    except Exception as e:
        batch.errors[node] = e
        logger.error(f"Unexpected error in {batch.label} for node {node}: {e}")
        return {"node": node, "status": "failed", "error": str(e)}


def run_per_node(
    nodes: Iterable[int],
    task: Callable[[int], T],
    concurrency: Optional[int] = None,
    label: str = "task",
) -> Dict[int, T]:
    """
    Run `task(node)` for every node as celery tasks and return the results keyed by node

    In eager mode (the default) the tasks run in-process in ascending node order.
    Otherwise an embedded thread-pool worker with `concurrency` threads consumes
    them; the tasks must only read shared state. Results are collected after all
    tasks finished (round barrier). If several tasks failed, the error of the
    smallest node id is raised.

    Args:
        nodes: Node ids
        task: Work for one node
        concurrency: Worker threads, defaults to settings.WORKER_CONCURRENCY
        label: Name used in log messages

    Returns:
        dict: node -> task result
    """
    nodes = sorted(nodes)
    concurrency = settings.WORKER_CONCURRENCY if concurrency is None else concurrency

    batch_id = uuid4().hex
    batch = NodeBatch(task, label)
    with _batches_lock:
        _batches[batch_id] = batch

    try:
        if celery_app.conf.task_always_eager or concurrency <= 1 or len(nodes) <= 1:
            for node in nodes:
                run_node.apply(args=(batch_id, node))
        else:
            with embedded_worker(concurrency):
                pending = [run_node.apply_async(args=(batch_id, node)) for node in nodes]
                for result in pending:
                    result.get(timeout=settings.TASK_TIMEOUT)
    finally:
        with _batches_lock:
            _batches.pop(batch_id, None)

    if batch.errors:
        first = min(batch.errors)
        logger.error(f"{label} failed for nodes {sorted(batch.errors)}")
        raise batch.errors[first]
    return {node: batch.results[node] for node in nodes}
