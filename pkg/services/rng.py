"""Counter-based random streams.

Every random draw in the project comes from a numpy ``Philox`` (4x64)
generator keyed by ``(seed, stream_id)``. The stream id is the first eight
bytes (little-endian) of a BLAKE2b digest of a slash-joined path such as
``noise/mv/17/2``, so streams are independent of draw order and identical
on every platform.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def stream_id(*path: object) -> int:
    digest = hashlib.blake2b("/".join(str(p) for p in path).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def philox(seed: int, *path: object) -> np.random.Generator:
    key = np.array([seed & MASK64, stream_id(*path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
