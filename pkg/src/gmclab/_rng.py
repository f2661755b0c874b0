"""Counter-style random streams.

Every stream is derived from ``(master seed, replica index, label)`` only, so
results do not depend on how replicas are batched or scheduled.
"""

import zlib

import numpy as np


def label_code(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, replica: int, label: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica), label_code(label)))
    return np.random.Generator(np.random.PCG64(ss))


def streams(seed: int, replicas, label: str) -> list:
    return [stream(seed, i, label) for i in replicas]


def normals(gens, size: int) -> np.ndarray:
    """One row of ``size`` standard normals from each generator."""
    out = np.empty((len(gens), size))
    for row, g in zip(out, gens):
        g.standard_normal(size, out=row)
    return out
