"""Bank of extended low-power high-gain observers.

Each output channel k runs a cascade of r_k two-dimensional blocks
eta_{k,i} = (eta1, eta2).  Block i estimates (xi_{k,i}, xi_{k,i+1}) and the
last block estimates (xi_{k,r_k}, sigma_k), so the bank reconstructs both
the chain states and the entire lumped perturbation while the high-gain
parameter ell_k never appears with a power above 2.  Cross-channel
multiplier terms are reproduced inside the bank using the top channels'
sigma estimates, which keeps every unavailable plant quantity matched with
an estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .control_law import ControllerConfig, perturbation_sigma
from .normal_form import PlantModel, PlantState, PlantStructureError

__all__ = [
    "ObserverGains", "ObserverState", "RescaledError",
    "observer_rhs", "extract_estimates", "error_coordinates",
    "embed_true_state", "lambda_weights",
]


@dataclass
class ObserverGains:
    """Per-block injection gain pairs and per-channel high-gain parameters.

    gamma[k][i] = (gamma1, gamma2) for channel k+1, block i+1 (both > 0);
    ell[k] >= 1 is channel k+1's high-gain parameter.
    """

    gamma: List[np.ndarray]
    ell: np.ndarray

    def __post_init__(self):
        self.gamma = [np.atleast_2d(np.asarray(g, dtype=float)) for g in self.gamma]
        self.ell = np.atleast_1d(np.asarray(self.ell, dtype=float))
        if len(self.gamma) != self.ell.size:
            raise ValueError("need one ell per channel")
        for k, g in enumerate(self.gamma, start=1):
            if g.ndim != 2 or g.shape[1] != 2:
                raise ValueError(f"channel {k} gains must be an (r_k, 2) array")
            if np.any(g <= 0):
                raise ValueError(f"channel {k} gain entries must be positive")
        if np.any(self.ell < 1.0):
            raise ValueError("high-gain parameters must satisfy ell >= 1")

    @property
    def m(self) -> int:
        return len(self.gamma)

    @property
    def orders(self) -> Tuple[int, ...]:
        return tuple(g.shape[0] for g in self.gamma)

    def check_structure(self, indices) -> None:
        if self.orders != indices.r:
            raise PlantStructureError(
                f"observer gain orders {self.orders} do not match plant orders {indices.r}")


@dataclass
class ObserverState:
    """Ragged bank state; channel k holds an (r_k, 2) array of blocks."""

    eta: List[np.ndarray]

    @classmethod
    def zero(cls, orders) -> "ObserverState":
        return cls([np.zeros((rk, 2)) for rk in orders])

    @classmethod
    def from_flat(cls, orders, vec: np.ndarray) -> "ObserverState":
        vec = np.asarray(vec, dtype=float)
        total = 2 * sum(orders)
        if vec.shape != (total,):
            raise ValueError(f"flat observer state must have length {total}")
        eta, off = [], 0
        for rk in orders:
            eta.append(vec[off : off + 2 * rk].reshape(rk, 2).copy())
            off += 2 * rk
        return cls(eta)

    def flat(self) -> np.ndarray:
        return np.concatenate([e.reshape(-1) for e in self.eta]) if self.eta else np.zeros(0)

    @property
    def orders(self) -> Tuple[int, ...]:
        return tuple(e.shape[0] for e in self.eta)


@dataclass
class RescaledError:
    """High-gain-weighted estimation errors; the bottom entries are the
    unweighted perturbation errors sigma_tilde."""

    eta_tilde: List[np.ndarray]
    sigma_tilde: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([e.reshape(-1) for e in self.eta_tilde])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def observer_rhs(plant: PlantModel, cfg: ControllerConfig, gains: ObserverGains,
                 eta: ObserverState, y: np.ndarray, u: np.ndarray) -> ObserverState:
    """Time derivative of the whole bank at (eta, y, u).

    Block i of channel k receives the innovation eta2_{k,i-1} - eta1_{k,i}
    (seeded with y_k for i = 1) through the gain pair scaled by
    (ell_k, ell_k^2).  Channels k >= 2 add the multiplier cross terms built
    from the upper channels' forcing estimates eta2_{j,r_j} + Bhat_j u; the
    penultimate block injects Bhat_k u into its second component and the
    last block into its first.
    """
    gains.check_structure(plant.indices)
    idx = plant.indices
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    Bu = cfg.Bhat @ u
    out: List[np.ndarray] = []
    for k in range(1, idx.m + 1):
        rk = idx.r[k - 1]
        ek = eta.eta[k - 1]
        lk = gains.ell[k - 1]
        gk = gains.gamma[k - 1]
        d = np.zeros((rk, 2))
        # forcing estimates s_j = eta2_{j,r_j} + Bhat_j u of the upper channels
        cross = [eta.eta[j - 1][-1, 1] + Bu[j - 1] for j in range(1, k)]
        for i in range(1, rk + 1):
            innov = (y[k - 1] if i == 1 else ek[i - 2, 1]) - ek[i - 1, 0]
            d1 = ek[i - 1, 1] + lk * gk[i - 1, 0] * innov
            d2 = lk * lk * gk[i - 1, 1] * innov
            if i < rk:
                d2 += ek[i, 1]                     # D2 coupling to the next block
            if i == rk - 1:
                d2 += Bu[k - 1]
            if i == rk:
                d1 += Bu[k - 1]
            if i < rk:                             # multiplier cross terms
                for j in range(1, k):
                    mj = _multiplier_entry(plant, k, j, i, y)
                    mj1 = _multiplier_entry(plant, k, j, i + 1, y)
                    d1 += mj * cross[j - 1]
                    d2 += mj1 * cross[j - 1]
            d[i - 1, 0] = d1
            d[i - 1, 1] = d2
        out.append(d)
    return ObserverState(out)


def _multiplier_entry(plant: PlantModel, k: int, j: int, slot: int, y: np.ndarray) -> float:
    """Entry `slot` (1-based) of the multiplier vector M_k^j(y)."""
    rj, rk = plant.indices.r[j - 1], plant.indices.r[k - 1]
    if rj <= slot <= rk - 1:
        return plant.delta_value(k, j, slot + 1, y)
    return 0.0


def extract_estimates(eta: ObserverState) -> Tuple[np.ndarray, np.ndarray]:
    """Chain and perturbation estimates (xi_hat, sigma_hat) from the bank.

    xi_hat stacks the first components of every block; sigma_hat collects
    the second component of each channel's last block.
    """
    xi_hat = np.concatenate([e[:, 0] for e in eta.eta])
    sigma_hat = np.array([e[-1, 1] for e in eta.eta])
    return xi_hat, sigma_hat


def embed_true_state(plant: PlantModel, state: PlantState, sigma: np.ndarray) -> ObserverState:
    """Bank state carrying the exact chain values and perturbation.

    Block i of channel k holds (xi_{k,i}, xi_{k,i+1}) with sigma_k in the
    final slot; extracting estimates from the result returns (xi, sigma)
    exactly, and with constant sigma the bank derivative reproduces the
    embedded signals' derivatives.
    """
    idx = plant.indices
    eta = []
    for k in range(1, idx.m + 1):
        rk = idx.r[k - 1]
        xk = np.asarray(state.xi[k - 1], dtype=float)
        e = np.zeros((rk, 2))
        e[:, 0] = xk
        e[:-1, 1] = xk[1:]
        e[-1, 1] = sigma[k - 1]
        eta.append(e)
    return ObserverState(eta)


def lambda_weights(gains: ObserverGains) -> np.ndarray:
    """Diagonal of Lambda_ell: per channel k the powers ell_k^{r_k}, ..., ell_k."""
    parts = []
    for rk, lk in zip(gains.orders, gains.ell):
        parts.append(lk ** np.arange(rk, 0, -1, dtype=float))
    return np.concatenate(parts)


def error_coordinates(plant: PlantModel, cfg: ControllerConfig, gains: ObserverGains,
                      state: PlantState, eta: ObserverState, u: np.ndarray,
                      t: Optional[float] = None) -> RescaledError:
    """High-gain-rescaled estimation errors at one closed-loop point.

    Component one of block i is ell_k^{r_k-i+1} (xi_{k,i} - eta1_{k,i});
    component two is ell_k^{r_k-i} (xi_{k,i+1} - eta2_{k,i}) with the true
    perturbation sigma_k standing in for the virtual xi_{k,r_k+1}, so the
    bottom entries sigma_k - eta2_{k,r_k} carry no ell scaling at all.
    """
    gains.check_structure(plant.indices)
    idx = plant.indices
    sigma = perturbation_sigma(plant, cfg, state, u, t)
    tilde: List[np.ndarray] = []
    for k in range(1, idx.m + 1):
        rk = idx.r[k - 1]
        lk = gains.ell[k - 1]
        xk = np.asarray(state.xi[k - 1], dtype=float)
        ek = eta.eta[k - 1]
        e = np.zeros((rk, 2))
        for i in range(1, rk + 1):
            e[i - 1, 0] = lk ** (rk - i + 1) * (xk[i - 1] - ek[i - 1, 0])
            truth = xk[i] if i < rk else sigma[k - 1]
            e[i - 1, 1] = lk ** (rk - i) * (truth - ek[i - 1, 1])
        tilde.append(e)
    return RescaledError(eta_tilde=tilde,
                         sigma_tilde=np.array([e[-1, 1] for e in tilde]))
