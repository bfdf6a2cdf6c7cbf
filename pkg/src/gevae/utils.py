"""Small shared helpers."""
from __future__ import annotations

import contextlib

import numpy as np
import torch


@contextlib.contextmanager
def float64_modules(seed: int | None = None):
    """Build modules in float64, optionally under a private torch seed.

    The global default dtype and the global RNG state are restored on exit.
    """
    previous = torch.get_default_dtype()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        torch.set_default_dtype(torch.float64)
        try:
            yield
        finally:
            torch.set_default_dtype(previous)


def spawn_seeds(root: int, names) -> dict[str, int]:
    """Independent integer seeds per named subsystem from one root seed."""
    names = list(names)
    children = np.random.SeedSequence(int(root)).spawn(len(names))
    return {name: int(child.generate_state(1, dtype=np.uint32)[0]) for name, child in zip(names, children)}


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))
