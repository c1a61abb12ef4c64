import zlib

import numpy as np


def _key(part) -> int:
    return zlib.crc32(part.encode("utf-8")) if isinstance(part, str) else int(part)


def substream(seed: int, name: str, *extra) -> np.random.Generator:
    """Independent generator derived from a run seed and a stream name."""
    key = (_key(name),) + tuple(_key(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def derive_seed(seed: int, name: str, *extra) -> int:
    """A child integer seed, for APIs that take seeds rather than generators."""
    return int(substream(seed, name, *extra).integers(2**63))
