"""Counter-based per-chain random streams.

Each chain owns a Philox generator keyed by ``(seed, chain_id, stream)``, so
its draw sequence is independent of every other chain and of how chains are
grouped into vectorized ensembles or threads.  Replaying a chain only needs
its key.
"""

from __future__ import annotations

import numpy as np

__all__ = ["chain_generator", "spawn_generators"]

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
# stream tags: 0 = kernel noise, 1 = initialization
KERNEL_STREAM = 0
INIT_STREAM = 1


def chain_generator(seed: int, chain_id: int, stream: int = KERNEL_STREAM) -> np.random.Generator:
    """Philox generator keyed by (seed, chain_id, stream)."""
    if chain_id < 0 or stream < 0:
        raise ValueError("chain_id and stream must be non-negative")
    lo = np.uint64((int(chain_id) << 8) | int(stream)) & _MASK64
    key = np.array([np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), lo], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def spawn_generators(seed: int, chain_ids, stream: int = KERNEL_STREAM) -> list:
    """One generator per chain id."""
    return [chain_generator(seed, int(c), stream) for c in chain_ids]
