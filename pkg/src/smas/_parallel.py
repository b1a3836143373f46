import os
from concurrent.futures import ProcessPoolExecutor


def n_workers(requested: int | None = None) -> int:
    """Worker count: ``requested``, else ``SMAS_THREADS``, capped by the CPU count."""
    cap = os.cpu_count() or 1
    env = os.environ.get("SMAS_THREADS")
    if requested is None and env:
        try:
            requested = int(env)
        except ValueError:
            requested = None
    if requested is None:
        requested = cap
    return max(1, min(int(requested), cap))


def ordered_map(fn, items, workers: int | None = None):
    """``list(map(fn, items))``, optionally in worker processes; order is preserved."""
    items = list(items)
    workers = n_workers(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
