"""Counter-based random streams keyed by ``(master_seed, stream_id)``.

Every random draw in the package goes through an :class:`RngStream`.  A stream
is an immutable key; calling :meth:`RngStream.generator` always returns a
fresh Philox generator positioned at the start of that key's sequence, so
results never depend on call order or on which worker ran a repetition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.stream_id < 0 or any(p < 0 for p in self.path):
            raise ValueError("stream ids must be nonnegative")

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent sub-stream, e.g. ``stream.child(rep, role)``."""
        return RngStream(self.master_seed, self.stream_id, self.path + tuple(int(i) for i in ids))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=int(self.master_seed) & _MASK64,
            spawn_key=(int(self.stream_id),) + self.path,
        )

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence()))
