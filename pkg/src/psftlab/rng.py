"""Named random streams.

Every stream is a Philox4x64-10 counter-based generator whose 128-bit key is
the first 16 bytes (little-endian) of ``BLAKE2b(f"{seed}/{name0}/{name1}/...")``.
Streams with different names are independent; the same (seed, names) pair
always yields the same sequence on every platform.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *names) -> int:
    path = "/".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.blake2b(path.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
