"""Deterministic fan-out of trajectory batches over worker processes."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

from .engine import NumericalError, SteadyStateError, splitmix64

# deterministic failures: rerunning the same seeds cannot help
_NO_RETRY = (NumericalError, SteadyStateError, ValueError)

log = logging.getLogger(__name__)


class WorkerFailure(RuntimeError):
    def __init__(self, indices, cause):
        super().__init__(f"trajectories {list(indices)} failed twice: {cause!r}")
        self.indices = list(indices)
        self.cause = cause


def trajectory_seeds(n: int, master_seed: int, start: int = 0) -> list:
    return [splitmix64(master_seed, i) for i in range(start, start + n)]


def _chunks(n: int, size: int):
    return [list(range(i, min(n, i + size))) for i in range(0, n, size)]


def schedule_trajectories(task: Callable[[Sequence[int]], list], n: int, master_seed: int,
                          workers: int = 1, batch_size: int = 64) -> list:
    """Run ``task(seeds)`` over ``n`` trajectories and return per-trajectory results
    in index order.

    ``task`` must be picklable when ``workers > 1`` and return one item per
    seed.  Because every trajectory owns its random stream the merged list
    does not depend on the worker count, batch size or completion order.
    A failing batch is retried once; a second failure aborts.
    """
    if n < 1:
        raise ValueError("need at least one trajectory")
    workers = max(1, int(workers or 1))
    seeds = trajectory_seeds(n, master_seed)
    if workers > 1:
        # keep every worker busy while preserving a minimum batch for vectorisation
        batch_size = max(1, min(batch_size, -(-n // workers)))
    chunks = _chunks(n, batch_size)
    out = [None] * n

    def store(idx, res):
        if len(res) != len(idx):
            raise RuntimeError("task returned the wrong number of results")
        for i, r in zip(idx, res):
            out[i] = r

    if workers == 1:
        for idx in chunks:
            store(idx, _run_with_retry(task, idx, [seeds[i] for i in idx]))
        return out

    with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or workers)) as pool:
        futures = [(idx, pool.submit(task, [seeds[i] for i in idx])) for idx in chunks]
        failed = []
        for idx, fut in futures:
            try:
                store(idx, fut.result())
            except _NO_RETRY:
                raise
            except Exception as exc:  # noqa: BLE001 - retried below
                log.warning("batch %d-%d failed (%r); retrying", idx[0], idx[-1], exc)
                failed.append(idx)
        for idx in failed:
            store(idx, _run_with_retry(task, idx, [seeds[i] for i in idx], retries=0))
    return out


def _run_with_retry(task, idx, seeds, retries=1):
    try:
        return task(seeds)
    except _NO_RETRY:
        raise
    except Exception as exc:  # noqa: BLE001
        if retries <= 0:
            raise WorkerFailure(idx, exc) from exc
        log.warning("batch %d-%d failed (%r); retrying", idx[0], idx[-1], exc)
        return _run_with_retry(task, idx, seeds, retries - 1)
