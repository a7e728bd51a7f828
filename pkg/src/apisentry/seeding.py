"""Named seed streams.

Every stochastic choice in the toolchain draws from a stream derived from
the task seed and a stream name, so adding a new stream never perturbs the
randomness of existing ones.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1


def derive_seed(seed: int, stream: str) -> int:
    """Mix a 64-bit task seed with a stream name into a new non-negative seed."""
    digest = hashlib.sha256(stream.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) & _MASK
