"""Named, counter-based random substreams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(root_seed, name)``. Names look like ``"invariant"`` or
``"sim:delta=0.05:batch=3"``, so adding a batch never perturbs another one.
"""
import hashlib

import numpy as np


def _name_words(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def substream(seed, name=""):
    """Return a ``numpy.random.Generator`` for the named substream of ``seed``."""
    if seed is None:
        raise ValueError("an explicit integer seed is required")
    ss = np.random.SeedSequence(int(seed), spawn_key=_name_words(name))
    return np.random.Generator(np.random.Philox(ss))


def sim_stream_name(delta, batch, tag="sim"):
    return f"{tag}:delta={float(delta)!r}:batch={int(batch)}"
