"""Named, splittable random streams.

Every consumer asks for a stream by (seed, name...). The name is hashed with
SHA-256 (never Python's salted ``hash``) into the spawn key of a SeedSequence
driving a Philox counter-based generator, so streams are stable across
processes and independent of the order in which they are requested.
"""

import hashlib

import numpy as np


def _name_key(name):
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed, *names):
    key = tuple(_name_key(n) for n in names)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
