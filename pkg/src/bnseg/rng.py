"""Counter-based random streams keyed by (seed, purpose tag).

Each consumer gets its own Philox stream, so adding a new random consumer
never perturbs existing streams and every run is reproducible bit-exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
