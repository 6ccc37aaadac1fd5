# workers.py — bounded fan-out for blocking jobs (generation, extraction, grid candidates)

import asyncio
import logging
from typing import Callable, Iterable, List, Optional, TypeVar

from utils import MAX_WORKERS

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


async def _gather_bounded(fn: Callable[[T], R], items: List[T], limit: int) -> List[R]:
    sem = asyncio.Semaphore(limit)

    async def worker(item):
        async with sem:
            return await asyncio.to_thread(fn, item)

    # gather keeps submission order, so merged output never depends on scheduling
    return await asyncio.gather(*(worker(it) for it in items))


def run_bounded(fn: Callable[[T], R], items: Iterable[T], limit: Optional[int] = None) -> List[R]:
    items = list(items)
    limit = max(1, int(limit or MAX_WORKERS))
    if limit == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(_gather_bounded(fn, items, limit))
    # already inside an event loop (e.g. the report server): stay sequential
    log.debug("event loop running, executing %d jobs inline", len(items))
    return [fn(it) for it in items]
