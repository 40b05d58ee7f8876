"""
Seed splitting - one master seed fans out to every role of an experiment.

derive_seed(master, "train", "sim-only") = master XOR h("train") XOR h("sim-only")
where h is a stable 64-bit blake2b digest of the tag.
"""
import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def tag_digest(tag: str) -> int:
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master: int, *tags) -> int:
    seed = int(master) & SEED_MASK
    for tag in tags:
        seed ^= tag_digest(tag)
    return seed


def make_rng(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


# Independent child seeds for per-index work (scenes, trials)
# Spawning keeps results identical whatever the worker count
def spawn_seeds(seed: int, count: int) -> list:
    return np.random.SeedSequence(int(seed) & SEED_MASK).spawn(count)
