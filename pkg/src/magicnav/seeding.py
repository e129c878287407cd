"""Hierarchical seeds: every random stream is named off a master seed."""
import hashlib

import numpy as np


def derive_seed(master, *names):
    text = ":".join([str(int(master))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def stream(master, *names):
    return np.random.default_rng(derive_seed(master, *names))
