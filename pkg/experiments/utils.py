import os
import random
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch
from tqdm import tqdm


def seed_everything(seed):
    os.environ["PPUM_GLOBAL_SEED"] = str(seed)
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def worker_count() -> int:
    workers = int(os.getenv("PPUM_WORKERS", "1"))
    return max(1, workers)


def derive_seeds(master: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master).generate_state(count)]


def run_replications(fn, jobs: list[tuple], desc: str = "runs", workers: int | None = None) -> list:
    """Apply fn(*job) to every job; results come back in job order whatever the worker count."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in tqdm(jobs, desc=desc, leave=False)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in tqdm(futures, desc=desc, leave=False)]
