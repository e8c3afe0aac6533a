"""Dataset iteration for DP-SGD: Poisson sampling vs random shuffling.

Poisson lots include each index independently with probability q = L/N (the
regime the accountant assumes); shuffling partitions a fresh permutation into
fixed-size lots each epoch. Both draw from the "sampler" stream of the master
seed, and both serialize their full state for bitwise-exact resume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpseq import rng as rng_mod


@dataclass(frozen=True)
class SamplerConfig:
    method: str  # "poisson" | "shuffle"
    n: int
    lot_size: int
    physical_batch: int
    seed: int

    def __post_init__(self):
        if self.method not in ("poisson", "shuffle"):
            raise ValueError(f"unknown sampling method {self.method!r}")
        if not (1 <= self.lot_size <= self.n):
            raise ValueError(f"lot size must satisfy 1 <= L <= N, got L={self.lot_size}, N={self.n}")
        if self.physical_batch < 1:
            raise ValueError("physical_batch must be >= 1")

    @property
    def q(self) -> float:
        return self.lot_size / self.n


@dataclass(frozen=True)
class Lot:
    indices: tuple[int, ...]
    step: int

    def __len__(self) -> int:
        return len(self.indices)


def lots_per_epoch(n: int, lot_size: int) -> int:
    """Expected lots per data pass, rounded up when L does not divide N."""
    if n < 1 or lot_size < 1:
        raise ValueError("N and L must be >= 1")
    return math.ceil(n / lot_size)


def micro_batches(lot: Lot, physical_batch: int) -> list[tuple[int, ...]]:
    """Order-preserving chunks of at most physical_batch indices."""
    if physical_batch < 1:
        raise ValueError("physical_batch must be >= 1")
    idx = lot.indices
    return [idx[i : i + physical_batch] for i in range(0, len(idx), physical_batch)]


class PoissonSampler:
    """Each index enters each lot independently with probability q; an empty
    lot is legal and triggers a noise-only step downstream."""

    def __init__(self, config: SamplerConfig):
        if config.method != "poisson":
            raise ValueError("PoissonSampler requires method='poisson'")
        self.config = config
        self._rng = rng_mod.stream_rng(config.seed, "sampler")
        self._step = 0

    def next_lot(self) -> Lot:
        mask = self._rng.random(self.config.n) < self.config.q
        indices = tuple(int(i) for i in np.nonzero(mask)[0])
        lot = Lot(indices, self._step)
        self._step += 1
        return lot

    def state_dict(self) -> dict:
        return {
            "method": "poisson",
            "step": self._step,
            "rng": rng_mod.get_state(self._rng),
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("method") != "poisson":
            raise ValueError("checkpoint sampler state is not poisson")
        self._step = int(state["step"])
        rng_mod.set_state(self._rng, state["rng"])


class ShuffleSampler:
    """Fresh uniform permutation per epoch, split into consecutive lots of
    size L; the final short lot is kept so each index appears exactly once."""

    def __init__(self, config: SamplerConfig):
        if config.method != "shuffle":
            raise ValueError("ShuffleSampler requires method='shuffle'")
        self.config = config
        self._rng = rng_mod.stream_rng(config.seed, "sampler")
        self._step = 0
        self._perm: np.ndarray | None = None
        self._pos = 0

    def next_lot(self) -> Lot:
        if self._perm is None or self._pos >= self.config.n:
            self._perm = self._rng.permutation(self.config.n)
            self._pos = 0
        end = min(self._pos + self.config.lot_size, self.config.n)
        indices = tuple(int(i) for i in self._perm[self._pos : end])
        self._pos = end
        lot = Lot(indices, self._step)
        self._step += 1
        return lot

    def state_dict(self) -> dict:
        return {
            "method": "shuffle",
            "step": self._step,
            "pos": self._pos,
            "perm": None if self._perm is None else [int(i) for i in self._perm],
            "rng": rng_mod.get_state(self._rng),
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("method") != "shuffle":
            raise ValueError("checkpoint sampler state is not shuffle")
        self._step = int(state["step"])
        self._pos = int(state["pos"])
        self._perm = None if state["perm"] is None else np.asarray(state["perm"], dtype=np.int64)
        rng_mod.set_state(self._rng, state["rng"])


def make_sampler(config: SamplerConfig):
    if config.method == "poisson":
        return PoissonSampler(config)
    return ShuffleSampler(config)
