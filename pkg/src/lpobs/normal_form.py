"""Multivariable normal form for invertible MIMO plants.

A plant is a chain-of-integrators form per output channel,

    xdot0  = f0(x0, xi, u)
    xidot_k = A_{r_k} xi_k + B_{r_k}[a_k(x) + b_k(x) u]
              + sum_{i<k} M_k^i(y) [a_i(x) + b_i(x) u],      y_k = xi_{k,1},

where the multiplier vectors M_k^i(y) couple lower channels into higher ones
through output-dependent coefficients delta^i_{k,j}(y).  This module holds
the structure bookkeeping (channel orders, state packing) and evaluates the
vector field and its structural matrices; it never inverts b(x).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

__all__ = [
    "StructureIndices", "PlantModel", "PlantState", "PlantStructureError",
    "SingularGainError", "prime_A", "prime_B", "prime_C",
    "multiplier_vector", "big_b_matrix", "plant_rhs",
]


class PlantStructureError(ValueError):
    """Raised when a plant violates the normal-form structural requirements."""


class SingularGainError(RuntimeError):
    """Raised when b(x) is numerically singular at an evaluation point."""


def prime_A(d: int) -> np.ndarray:
    """d x d shift matrix of the prime form (ones on the superdiagonal)."""
    return np.eye(d, k=1)


def prime_B(d: int) -> np.ndarray:
    """Last canonical basis vector of R^d."""
    e = np.zeros(d)
    e[-1] = 1.0
    return e


def prime_C(d: int) -> np.ndarray:
    """First canonical basis vector of R^d as a row."""
    e = np.zeros(d)
    e[0] = 1.0
    return e


@dataclass(frozen=True)
class StructureIndices:
    """Channel count, zero-dynamics dimension and per-channel orders."""

    m: int
    n0: int
    r: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(int(v) for v in self.r))
        if self.m != len(self.r):
            raise PlantStructureError(f"m={self.m} but {len(self.r)} channel orders given")
        if self.m < 1:
            raise PlantStructureError("at least one output channel is required")
        if self.n0 < 0:
            raise PlantStructureError("n0 must be nonnegative")
        if any(rk < 2 for rk in self.r):
            # two 2-dimensional observer blocks per channel are the minimum
            # the low-power layout defines; r_k = 1 has no specified bank
            raise PlantStructureError(f"every channel order must be >= 2, got {self.r}")
        if any(self.r[i] > self.r[i + 1] for i in range(self.m - 1)):
            raise PlantStructureError(f"channel orders must be nondecreasing, got {self.r}")

    @property
    def r_total(self) -> int:
        """Total chain order (dimension of xi)."""
        return sum(self.r)

    @property
    def n(self) -> int:
        """Full state dimension n0 + sum(r)."""
        return self.n0 + self.r_total

    def xi_offset(self, k: int) -> int:
        """Offset of channel k (1-based) inside the flattened xi vector."""
        if not 1 <= k <= self.m:
            raise PlantStructureError(f"channel {k} out of range 1..{self.m}")
        return sum(self.r[: k - 1])


@dataclass
class PlantState:
    """Plant state split into zero-dynamics part x0 and ragged chains xi."""

    x0: np.ndarray
    xi: List[np.ndarray]

    @classmethod
    def zero(cls, idx: StructureIndices) -> "PlantState":
        return cls(np.zeros(idx.n0), [np.zeros(rk) for rk in idx.r])

    @classmethod
    def from_flat(cls, idx: StructureIndices, vec: np.ndarray) -> "PlantState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (idx.n,):
            raise PlantStructureError(f"flat state must have length {idx.n}, got {vec.shape}")
        x0 = vec[: idx.n0].copy()
        xi, off = [], idx.n0
        for rk in idx.r:
            xi.append(vec[off : off + rk].copy())
            off += rk
        return cls(x0, xi)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x0] + [np.asarray(x, float) for x in self.xi])

    def xi_flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(x, float) for x in self.xi]) if self.xi else np.zeros(0)

    @property
    def y(self) -> np.ndarray:
        """Outputs y_k = xi_{k,1}."""
        return np.array([x[0] for x in self.xi])


# hook signatures:
#   f0(x0, xi_flat, u) -> R^{n0}
#   a(x_flat) -> R^m          b(x_flat) -> R^{m x m}
#   delta[(k, i, j)](y) -> float     for 2<=k<=m, 1<=i<k, r_i+1<=j<=r_k
#   disturbance(t) -> R^m      (added to a(x) in the chain forcing)
@dataclass
class PlantModel:
    """Normal-form plant with evaluation hooks for f0, a, b and multipliers."""

    indices: StructureIndices
    f0: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    a: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    delta: Dict[Tuple[int, int, int], Callable[[np.ndarray], float]] = field(default_factory=dict)
    disturbance: Optional[Callable[[float], np.ndarray]] = None
    name: str = ""
    # optional closed-loop Lyapunov function of the ideally-controlled plant,
    # used for region sampling in the design pipeline (quadratic for bundled
    # plants); None means the design commands cannot sample sublevel sets
    vx: Optional[Callable[[np.ndarray], float]] = None
    vx_quadratic: Optional[np.ndarray] = None   # P matrix when vx = x'Px
    fast_key: Optional[str] = None              # compiled-kernel registry key

    def __post_init__(self):
        idx = self.indices
        for (k, i, j) in self.delta:
            if not (2 <= k <= idx.m and 1 <= i < k):
                raise PlantStructureError(f"delta channel pair ({k},{i}) out of range")
            if not (idx.r[i - 1] + 1 <= j <= idx.r[k - 1]):
                raise PlantStructureError(
                    f"delta^{i}_{k},{j} index j out of range "
                    f"{idx.r[i-1]+1}..{idx.r[k-1]}")
        a0 = np.asarray(self.a(np.zeros(idx.n)), dtype=float)
        if a0.shape != (idx.m,):
            raise PlantStructureError(f"a(x) must return an R^{idx.m} vector")
        if np.max(np.abs(a0)) > 1e-12:
            raise PlantStructureError(
                f"a(0) must vanish; got |a(0)| = {np.max(np.abs(a0)):.3e}")

    def a_eval(self, x_flat: np.ndarray, t: Optional[float] = None) -> np.ndarray:
        """a(x), plus the configured disturbance d(t) when t is given."""
        val = np.asarray(self.a(x_flat), dtype=float)
        if t is not None and self.disturbance is not None:
            val = val + np.asarray(self.disturbance(t), dtype=float)
        return val

    def b_eval(self, x_flat: np.ndarray) -> np.ndarray:
        mat = np.asarray(self.b(x_flat), dtype=float)
        m = self.indices.m
        if mat.shape != (m, m):
            raise PlantStructureError(f"b(x) must return an {m}x{m} matrix")
        return mat

    def b_inverse(self, x_flat: np.ndarray) -> np.ndarray:
        """Inverse of b(x); raises SingularGainError near singularity."""
        mat = self.b_eval(x_flat)
        smin = np.linalg.svd(mat, compute_uv=False)[-1]
        if smin <= 1e-10:
            raise SingularGainError(
                f"b(x) singular at evaluation point (sigma_min = {smin:.3e})")
        return np.linalg.inv(mat)

    def delta_value(self, k: int, i: int, j: int, y: np.ndarray) -> float:
        hook = self.delta.get((k, i, j))
        return float(hook(y)) if hook is not None else 0.0


def multiplier_vector(plant: PlantModel, k: int, i: int, y: np.ndarray) -> np.ndarray:
    """Multiplier vector M_k^i(y) in R^{r_k}.

    Entries 1..r_i-1 and the last entry are structurally zero; entry j
    (r_i <= j <= r_k-1) carries delta^i_{k,j+1}(y).
    """
    idx = plant.indices
    if not (2 <= k <= idx.m and 1 <= i < k):
        raise PlantStructureError(f"multiplier indices require 1 <= i < k <= m, got k={k}, i={i}")
    rk, ri = idx.r[k - 1], idx.r[i - 1]
    out = np.zeros(rk)
    for j in range(ri, rk):           # 1-based slots r_i .. r_k-1
        out[j - 1] = plant.delta_value(k, i, j + 1, y)
    return out


def big_b_matrix(plant: PlantModel, y: np.ndarray) -> np.ndarray:
    """Block lower-triangular input map of the chain subsystem.

    The diagonal blocks are the prime-form B_{r_k} columns and the strictly
    lower blocks are the multiplier vectors; the result maps the m-vector of
    channel forcings into the stacked chain derivative.
    """
    idx = plant.indices
    out = np.zeros((idx.r_total, idx.m))
    for k in range(1, idx.m + 1):
        off = idx.xi_offset(k)
        rk = idx.r[k - 1]
        out[off + rk - 1, k - 1] = 1.0
        for i in range(1, k):
            out[off : off + rk, i - 1] = multiplier_vector(plant, k, i, y)
    return out


def plant_rhs(plant: PlantModel, state: PlantState, u: np.ndarray,
              t: Optional[float] = None) -> PlantState:
    """Plant vector field at (state, u, t).

    The optional time only enters through the configured additive
    disturbance on a(x); b(x) is evaluated but never inverted here.
    """
    idx = plant.indices
    u = np.asarray(u, dtype=float)
    x_flat = state.flat()
    y = state.y
    w = plant.a_eval(x_flat, t) + plant.b_eval(x_flat) @ u   # channel forcings
    xi_dot: List[np.ndarray] = []
    for k in range(1, idx.m + 1):
        rk = idx.r[k - 1]
        xk = np.asarray(state.xi[k - 1], dtype=float)
        d = np.zeros(rk)
        d[:-1] = xk[1:]                 # shift part A_{r_k} xi_k
        d[-1] = w[k - 1]                # B_{r_k} forcing
        for i in range(1, k):
            d += multiplier_vector(plant, k, i, y) * w[i - 1]
        xi_dot.append(d)
    x0_dot = np.asarray(plant.f0(state.x0, state.xi_flat(), u), dtype=float)
    if x0_dot.shape != (idx.n0,):
        raise PlantStructureError(f"f0 must return an R^{idx.n0} vector")
    return PlantState(x0_dot, xi_dot)
