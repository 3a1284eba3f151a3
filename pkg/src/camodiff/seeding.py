"""Stateless seed derivation so every draw is a pure function of (seed, role).

Training steps, epoch shuffles, per-image sampling chains and ensemble members
each get their own generator seeded by hashing the base seed together with a
role tag and indices. Resuming at step k therefore reproduces the exact draws
of an uninterrupted run, and batch composition never affects per-image noise.
"""

import hashlib

import torch


def derive_seed(*parts) -> int:
    """Hash a tuple of ints/strings into a uint63 torch.manual_seed value."""
    data = "/".join(str(p) for p in parts).encode()
    digest = hashlib.blake2b(data, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def make_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g
