"""Region samplers for the Monte-Carlo estimates in the design pipeline.

Every estimate (mu0, iota, delta1, delta2, saturation supremum) draws its
evidence from a sampler; samplers are passed an explicit NumPy Generator so
runs are reproducible and parallelizable by seed partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["BoxSampler", "SublevelSampler", "quadratic_form_box"]


@dataclass
class BoxSampler:
    """Uniform sampling over an axis-aligned box."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("box bounds must be equal-shaped with lo <= hi")

    @property
    def dim(self) -> int:
        return self.lo.size

    def describe(self) -> str:
        return f"box[{self.lo.min():.3g}, {self.hi.max():.3g}]^{self.dim}"

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))


def quadratic_form_box(P: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Tight axis-aligned bounding box of the ellipsoid {x : x'Px <= level}.

    The extent along coordinate i is sqrt(level * (P^-1)_ii).
    """
    P = np.asarray(P, dtype=float)
    ext = np.sqrt(level * np.diag(np.linalg.inv(P)))
    return -ext, ext


@dataclass
class SublevelSampler:
    """Rejection sampling of the sublevel set {x : vx(x) <= level}.

    Proposals are drawn uniformly from ``box`` and rejected against the
    scalar hook ``vx``.  When ``vx`` is the quadratic form x'Px, build the
    box with :func:`quadratic_form_box` so it contains the whole set.
    """

    vx: Callable[[np.ndarray], float]
    level: float
    box: BoxSampler
    max_tries: int = 1000
    label: str = ""

    def describe(self) -> str:
        name = self.label or "sublevel"
        return f"{name}(vx <= {self.level:g}) via {self.box.describe()}"

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, self.box.dim))
        have = 0
        for _ in range(self.max_tries):
            batch = self.box.sample(max(n, 256), rng)
            vals = np.array([self.vx(x) for x in batch])
            accepted = batch[vals <= self.level]
            take = min(n - have, len(accepted))
            if take:
                out[have : have + take] = accepted[:take]
                have += take
            if have == n:
                return out
        raise RuntimeError(
            f"sublevel sampler failed to hit vx <= {self.level} "
            f"after {self.max_tries} batches; check the bounding box")
