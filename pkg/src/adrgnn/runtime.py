"""Numeric width and random-stream policy shared by every module.

Double precision is the default; single precision is opt-in via
``set_default_dtype("float32")`` or the ``ADRGNN_DTYPE`` environment
variable. All randomness flows through Philox counter-based generators so
masks, inits and sampled graphs reproduce bit-for-bit across platforms.
"""

from __future__ import annotations

import os

import numpy as np

_DTYPE = np.float64


def set_default_dtype(name: str) -> None:
    """Select the working precision ("float64" or "float32")."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unsupported dtype {name!r}; use 'float64' or 'float32'")
    _DTYPE = np.float64 if name == "float64" else np.float32


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


if os.environ.get("ADRGNN_DTYPE"):
    set_default_dtype(os.environ["ADRGNN_DTYPE"])


def philox(seed: int, counter: int = 0) -> np.random.Generator:
    """Counter-based generator: same (seed, counter) gives the same stream
    on every platform."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(counter)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class SeedStream:
    """Hands out independent Philox generators from one master seed.

    Each call to :meth:`child` bumps an internal counter, so consumers
    (dropout masks, parameter inits, split shuffles) get decorrelated but
    fully reproducible streams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._counter = 0

    def child(self) -> np.random.Generator:
        rng = philox(self.seed, self._counter)
        self._counter += 1
        return rng

    def child_seed(self) -> int:
        """A derived integer seed (for spawning nested streams)."""
        rng = self.child()
        return int(rng.integers(0, 2**63 - 1))
