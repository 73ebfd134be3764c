"""
Seeded parallel episode execution.
- episode_seed derives independent per-episode seeds from (base seed, key) with numpy SeedSequence
- run_episodes maps a picklable task over keys on a process pool and returns results in key order,
  so output does not depend on the worker count or on completion order
"""

import concurrent.futures

import numpy as np
from tqdm import tqdm

from scripts.config import worker_count


def episode_seed(seed, *key):
    """Stable 32-bit seed for the episode identified by integer key components."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1)[0])


def run_episodes(task, items, workers=None, progress=False, desc="episodes"):
    items = list(items)
    workers = worker_count() if workers is None else max(1, int(workers))
    workers = min(workers, max(len(items), 1))
    if workers == 1:
        return [task(item) for item in tqdm(items, desc=desc, disable=not progress)]
    results = [None] * len(items)
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(task, item): idx for idx, item in enumerate(items)}
        pending = concurrent.futures.as_completed(futures)
        for future in tqdm(pending, total=len(items), desc=desc, disable=not progress):
            results[futures[future]] = future.result()
    return results
