"""Seed plumbing: every stochastic operation derives a private stream here."""

from __future__ import annotations

import numpy as np
import torch


def derive_seed(seed: int, *salt: int) -> int:
    """Stable 32-bit child seed for (seed, salt...)."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFF_FFFF, *salt]).generate_state(1)[0])


def seed_torch(seed: int) -> None:
    torch.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)


def rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed) & 0xFFFF_FFFF, *salt])))
