"""Counter-based random number generation.

Every random draw in the pipeline comes from a Philox counter-based stream
addressed by an explicit (seed, counter) pair, so any part of a run can be
reproduced without replaying the draws that came before it. Derived streams
advance the Philox counter by ``stream_index * 2**64`` blocks, which keeps
streams non-overlapping for any realistic draw count.

Stream purposes (the high byte of the packed counter):
    SCENE      per-scene synthesis, indexed by scene number
    SHUFFLE    per-epoch dataset ordering
    TIME       per-optimizer-step, per-micro-batch time draws
    NOISE      per-step, per-micro-batch flow noise
    INIT       network parameter initialization
    SAMPLE     inference-time noise seeds
    DROPOUT    per-micro-batch prior dropout decisions
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .errors import ContractError

SCENE = 1
SHUFFLE = 2
TIME = 3
NOISE = 4
INIT = 5
SAMPLE = 6
DROPOUT = 7

_U64 = 1 << 64
_A_BITS = 28
_B_BITS = 28


def pack_stream(purpose: int, a: int = 0, b: int = 0) -> int:
    """Pack (purpose, a, b) into the 64-bit stream counter."""
    if not 0 <= purpose < 256:
        raise ContractError(f"stream purpose out of range: {purpose}")
    if not 0 <= a < (1 << _A_BITS) or not 0 <= b < (1 << _B_BITS):
        raise ContractError(f"stream index out of range: a={a} b={b}")
    return (purpose << (_A_BITS + _B_BITS)) | (a << _B_BITS) | b


@dataclass(frozen=True)
class RngState:
    """Address of one deterministic random stream."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < _U64 or not 0 <= self.counter < _U64:
            raise ContractError("seed and counter must be unsigned 64-bit values")

    def stream(self, purpose: int, a: int = 0, b: int = 0) -> "RngState":
        """Derive the sub-stream for the given purpose and indices."""
        return RngState(self.seed, pack_stream(purpose, a, b))

    def generator(self) -> Generator:
        """Materialize the numpy Generator positioned at this stream."""
        bitgen = Philox(key=self.seed)
        if self.counter:
            bitgen.advance(self.counter * _U64)
        return Generator(bitgen)
