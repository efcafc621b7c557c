"""Named random substreams derived from a single integer seed."""
import zlib

import numpy as np
import torch


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name):
    """A numpy Generator that depends only on ``(seed, name)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _key(name)]))


def subseed(seed, name):
    """A 63-bit integer seed for libraries that need a plain integer."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _key(name)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed, name):
    g = torch.Generator()
    g.manual_seed(subseed(seed, name))
    return g


def as_generator(random_state):
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)
