"""
Counter-Based Random Streams

Philox streams keyed by (seed, stream_index). Normals are produced in fixed-size blocks;
block b is generated from the Philox counter (0, 0, b, 0), so the draw for any step
counter depends only on (seed, stream_index, counter) and never on how a run was chunked.
"""

import logging
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

BLOCK_STEPS = 4096

# Sub-stream tags placed in the last Philox counter word
NORMALS = 0
UNIFORMS = 1


class RngStream:
    """
    Deterministic standard-normal stream for one trajectory or one coupled pair.

    Attributes:
        seed (int): 64-bit master seed
        stream_index (int): 64-bit stream number, one per trajectory or pair
        counter (int): Index of the next step to be drawn
        width (int): Normals per step (2 for a single path, 4 for a pair)
    """

    def __init__(self, seed: int, stream_index: int, width: int = 2, counter: int = 0):
        if seed < 0 or stream_index < 0:
            raise ValueError("seed and stream_index must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_index = int(stream_index) & 0xFFFFFFFFFFFFFFFF
        self.width = width
        self.counter = counter
        self._block_id: Optional[int] = None
        self._block: Optional[np.ndarray] = None
        self._uniform_counter = 0

    def _generator(self, block: int, tag: int) -> np.random.Generator:
        bit_gen = np.random.Philox(
            key=np.array([self.seed, self.stream_index], dtype=np.uint64),
            counter=np.array([0, 0, block, tag], dtype=np.uint64),
        )
        return np.random.Generator(bit_gen)

    def _load(self, block: int) -> np.ndarray:
        if self._block_id != block:
            gen = self._generator(block, NORMALS)
            self._block = gen.standard_normal((BLOCK_STEPS, self.width))
            self._block_id = block
        return self._block

    def normals(self, steps: int) -> np.ndarray:
        """Next ``steps`` rows of standard normals; advances the counter."""
        out = np.empty((steps, self.width))
        filled = 0
        while filled < steps:
            block, offset = divmod(self.counter, BLOCK_STEPS)
            take = min(steps - filled, BLOCK_STEPS - offset)
            out[filled:filled + take] = self._load(block)[offset:offset + take]
            filled += take
            self.counter += take
        return out

    def rewind(self, counter: int) -> None:
        """Move the counter back to an earlier step (used when a chunk stops early)."""
        if counter < 0:
            raise ValueError("counter must be non-negative")
        self.counter = counter

    def uniforms(self, count: int) -> np.ndarray:
        """Uniforms from a sub-stream disjoint from the normals."""
        gen = self._generator(self._uniform_counter, UNIFORMS)
        self._uniform_counter += 1
        return gen.random(count)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_index={self.stream_index}, counter={self.counter})"
