"""Named random streams derived from one master seed.

Every source of randomness in the package draws from one of four named
streams so that reordering work in one subsystem (say, data batching)
never perturbs another (say, diffusion noise).  Stream states are plain
dicts, which makes them checkpointable as JSON.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError

STREAM_NAMES = ("init", "dropout", "diffusion-noise", "data")


def stream_seed(master_seed: int, name: str) -> int:
    """Stable 64-bit sub-seed for a named stream."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngHub:
    """Holds the master seed and hands out per-stream generators."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in STREAM_NAMES:
            raise ConfigError(f"unknown rng stream {name!r}; expected one of {STREAM_NAMES}")
        if name not in self._streams:
            self._streams[name] = np.random.default_rng(stream_seed(self.master_seed, name))
        return self._streams[name]

    def state(self) -> dict:
        """JSON-serializable snapshot of the master seed and all touched streams."""
        return {
            "master_seed": self.master_seed,
            "streams": {name: gen.bit_generator.state for name, gen in self._streams.items()},
        }

    def set_state(self, state: dict) -> None:
        self.master_seed = int(state["master_seed"])
        self._streams = {}
        for name, bg_state in state["streams"].items():
            gen = np.random.default_rng(stream_seed(self.master_seed, name))
            gen.bit_generator.state = bg_state
            self._streams[name] = gen

    def derived(self, name: str, salt: int) -> np.random.Generator:
        """Fresh generator for (stream, salt); used for pure per-epoch shuffles."""
        if name not in STREAM_NAMES:
            raise ConfigError(f"unknown rng stream {name!r}; expected one of {STREAM_NAMES}")
        return np.random.default_rng(stream_seed(self.master_seed, f"{name}/{salt}"))
