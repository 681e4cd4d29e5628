"""Counter-based deterministic random stream (splitmix64 core).

Every draw is a pure function of (seed, counter), so a stream can be
serialized into a run manifest and resumed or replayed on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed; used to give sub-tasks independent streams."""
    z = seed & _MASK
    for k in keys:
        z = _mix((z + _GOLDEN + (k & _MASK)) & _MASK)
    return z


@dataclass
class RngStream:
    """splitmix64 stream; output i is mix(seed + (i+1)*golden)."""

    seed: int
    counter: int = 0

    def next_u64(self) -> int:
        self.counter += 1
        return _mix((self.seed + self.counter * _GOLDEN) & _MASK)

    def _u64_block(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed & _MASK) + idx * np.uint64(_GOLDEN)
        return _mix_array(states)

    def uniform(self) -> float:
        """One float in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        return (self._u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (pairs of uniforms)."""
        m = (n + 1) // 2
        u = self._u64_block(2 * m)
        # u1 in (0,1] keeps the log finite
        u1 = ((u[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (u[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_weighted(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to non-negative weights (sum > 0)."""
        total = float(weights.sum())
        if total <= 0.0:
            raise ValueError("weights must have positive sum")
        cum = np.cumsum(weights, dtype=np.float64)
        u = self.uniform() * total
        return min(int(np.searchsorted(cum, u, side="right")), len(weights) - 1)

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct integers from range(n), uniform, order of draw kept."""
        if k > n:
            raise ValueError("cannot draw %d from %d" % (k, n))
        if 3 * k >= n:
            return [int(j) for j in self.permutation(n)[:k]]
        chosen: list[int] = []
        taken = set()
        while len(chosen) < k:
            j = self.randint(n)
            if j not in taken:
                taken.add(j)
                chosen.append(j)
        return chosen
