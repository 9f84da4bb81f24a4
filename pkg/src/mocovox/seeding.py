"""Order-independent seed derivation for per-sample random streams."""

import hashlib
import os

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings."""
    text = "\x1f".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def worker_threads() -> int:
    """Worker-pool cap from MOCOVOX_THREADS; 0 means single-threaded."""
    try:
        return max(0, int(os.environ.get("MOCOVOX_THREADS", "0")))
    except ValueError:
        return 0


def pool_map(fn, items, threads=None):
    threads = worker_threads() if threads is None else threads
    if threads <= 0:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
