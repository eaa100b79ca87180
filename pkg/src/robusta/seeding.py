"""Per-purpose random stream derivation.

Every random draw in the toolkit comes from ``derive_rng(seed, purpose, *keys)``.
The stream depends only on the global seed, a purpose tag and integer or string
keys, so subcommands and parallel workers reproduce each other bitwise.
"""

import hashlib
import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"negative seed key: {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed_sequence(seed, purpose, *keys):
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode("utf-8"))]
    entropy.extend(_key_to_int(k) for k in keys)
    return np.random.SeedSequence(entropy)


def derive_rng(seed, purpose, *keys):
    return np.random.default_rng(derive_seed_sequence(seed, purpose, *keys))


def config_hash(items):
    """64-bit hash of a flat mapping, stable across runs and platforms."""
    text = "\n".join(f"{k}={items[k]!r}" for k in sorted(items))
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
