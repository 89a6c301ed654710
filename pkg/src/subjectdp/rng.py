"""Counter-based random streams keyed by (purpose, round, user, batch).

Each purpose gets an independent Philox stream derived from the run seed, so
two trainers that differ only in how they use noise still see the same
minibatches draw for draw.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    SAMPLING = 0
    NOISE = 1
    USERS = 2
    INIT = 3


class RngStreams:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def generator(self, purpose: Purpose, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(purpose), *map(int, key)))
        return np.random.Generator(np.random.Philox(ss))

    def for_user(self, user: int, round_: int) -> "UserRoundStreams":
        return UserRoundStreams(self, user, round_)


class UserRoundStreams:
    """Streams of one user within one round, indexed by batch number."""

    def __init__(self, streams: RngStreams, user: int, round_: int):
        self._streams = streams
        self.user = user
        self.round = round_

    def sampling(self, batch: int) -> np.random.Generator:
        return self._streams.generator(Purpose.SAMPLING, self.round, self.user, batch)

    def noise(self, batch: int) -> np.random.Generator:
        return self._streams.generator(Purpose.NOISE, self.round, self.user, batch)
