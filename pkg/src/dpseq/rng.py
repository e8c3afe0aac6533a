"""Named RNG streams split from one master seed.

Each consumer (sampler, noise, init, synth) gets an independent generator, so
changing how one stream is consumed never perturbs the others. Generator
state round-trips through plain dicts for exact checkpoint resume.
"""

from __future__ import annotations

import numpy as np

# stable registry: adding a stream appends, never renumbers
_STREAM_IDS = {
    "sampler": 1,
    "noise": 2,
    "init": 3,
    "synth": 4,
}


def stream_rng(master_seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 generator for a named stream of the master seed."""
    if name not in _STREAM_IDS:
        raise ValueError(f"unknown rng stream {name!r}; known: {sorted(_STREAM_IDS)}")
    seq = np.random.SeedSequence([int(master_seed), _STREAM_IDS[name]])
    return np.random.Generator(np.random.PCG64(seq))


def get_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng
