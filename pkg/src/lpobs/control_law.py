"""Saturated output-feedback law, its ideal full-state reference, and the
implicit control equation.

The implementable law is u = -Bhat^{-1} satv_l(sigma_hat + K xi_hat): a
constant decoupling matrix, a stabilizing gain on the estimated chains, and
a cancellation of the estimated lumped perturbation sigma = a(x) + (b(x) -
Bhat) u, all wrapped in a smooth saturation that neutralizes observer
peaking.  Closing the estimate errors back through the law yields an
implicit equation in u whose unique solution is computed here by a
fixed-point iteration contracting at rate mu0 < 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .normal_form import PlantModel, PlantState

__all__ = [
    "ControllerConfig", "MuCertificate", "ImplicitSolution",
    "AssumptionViolation", "ImplicitSolveError",
    "satv", "satv_jacobian", "ideal_control", "perturbation_sigma",
    "output_feedback_control", "solve_implicit_control", "estimate_mu0",
]


class AssumptionViolation(RuntimeError):
    """A standing assumption of the design fails on the supplied data."""


class ImplicitSolveError(RuntimeError):
    """Fixed-point iteration for the implicit control failed to contract."""


def satv(s: np.ndarray, level: float, eps0: float) -> np.ndarray:
    """Smooth componentwise saturation.

    Identity for |s_i| <= level; beyond the level each component blends into
    sign(s_i) * (level + eps0 * tanh((|s_i| - level)/eps0)), which matches
    slope 1 at the threshold and approaches level + eps0 at infinity.
    """
    if level <= 0:
        raise ValueError("saturation level must be positive")
    if not 0 < eps0 < 1:
        raise ValueError("smoothness margin eps0 must lie in (0, 1)")
    s = np.asarray(s, dtype=float)
    out = s.copy()
    over = np.abs(s) > level
    if np.any(over):
        out[over] = np.sign(s[over]) * (level + eps0 * np.tanh((np.abs(s[over]) - level) / eps0))
    return out


def satv_jacobian(s: np.ndarray, level: float, eps0: float) -> np.ndarray:
    """Diagonal Jacobian of :func:`satv`; entries lie in (0, 1]."""
    s = np.asarray(s, dtype=float)
    d = np.ones_like(s)
    over = np.abs(s) > level
    if np.any(over):
        # clamp the excess so cosh cannot overflow; sech^2 underflows to 0 anyway
        z = np.minimum((np.abs(s[over]) - level) / eps0, 300.0)
        d[over] = 1.0 / np.cosh(z) ** 2
    return np.diag(d)


def _hurwitz_margin(M: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(M).real))


@dataclass
class ControllerConfig:
    """Constant decoupling matrix, stabilizing gains and saturation shape."""

    Bhat: np.ndarray
    K_blocks: List[np.ndarray]
    sat_level: float
    eps0: float = 0.5

    Bhat_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.Bhat = np.asarray(self.Bhat, dtype=float)
        self.K_blocks = [np.atleast_1d(np.asarray(k, dtype=float)) for k in self.K_blocks]
        m = len(self.K_blocks)
        if self.Bhat.shape != (m, m):
            raise ValueError(f"Bhat must be {m}x{m} to match {m} gain blocks")
        cond = np.linalg.cond(self.Bhat)
        if not np.isfinite(cond):
            raise ValueError("Bhat must be invertible")
        self.Bhat_inv = np.linalg.inv(self.Bhat)
        if self.sat_level <= 0:
            raise ValueError("sat_level must be positive")
        if not 0 < self.eps0 < 1:
            raise ValueError("eps0 must lie in (0, 1)")
        for k, Kk in enumerate(self.K_blocks, start=1):
            rk = Kk.size
            A = np.eye(rk, k=1)
            A[-1, :] -= Kk
            if _hurwitz_margin(A) >= -1e-9:
                raise ValueError(f"closed-loop block {k} is not Hurwitz for K_{k}={Kk}")

    @property
    def m(self) -> int:
        return len(self.K_blocks)

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(k.size for k in self.K_blocks)

    @property
    def K(self) -> np.ndarray:
        """Block-diagonal gain matrix mapping the stacked chains to R^m."""
        r = self.orders
        K = np.zeros((self.m, sum(r)))
        off = 0
        for i, Kk in enumerate(self.K_blocks):
            K[i, off : off + Kk.size] = Kk
            off += Kk.size
        return K

    def stabilizing_term(self, xi_flat: np.ndarray) -> np.ndarray:
        """K xi without materializing the block-diagonal matrix."""
        out = np.zeros(self.m)
        off = 0
        for i, Kk in enumerate(self.K_blocks):
            out[i] = Kk @ xi_flat[off : off + Kk.size]
            off += Kk.size
        return out


@dataclass
class MuCertificate:
    """Sampled bound on the relative gain deviation |(b(x)-Bhat)Bhat^{-1}|."""

    mu0: float
    region: str
    sample_count: int
    worst_sample: np.ndarray
    raw_max: float

    def as_dict(self) -> dict:
        return {
            "mu0": self.mu0,
            "region": self.region,
            "sample_count": self.sample_count,
            "raw_max": self.raw_max,
            "worst_sample": np.asarray(self.worst_sample).tolist(),
        }


def ideal_control(plant: PlantModel, cfg: ControllerConfig, state: PlantState) -> np.ndarray:
    """Full-state law u* = b(x)^{-1}(-a(x) + v), v_k = -K_k xi_k."""
    x = state.flat()
    v = -cfg.stabilizing_term(state.xi_flat())
    return plant.b_inverse(x) @ (-plant.a_eval(x) + v)


def perturbation_sigma(plant: PlantModel, cfg: ControllerConfig, state: PlantState,
                       u: np.ndarray, t: Optional[float] = None) -> np.ndarray:
    """Lumped perturbation sigma = a(x) + (b(x) - Bhat) u.

    Passing t folds the configured additive disturbance into a(x), which is
    what the observer bank actually tracks during a perturbed run.
    """
    x = state.flat()
    return plant.a_eval(x, t) + (plant.b_eval(x) - cfg.Bhat) @ np.asarray(u, dtype=float)


def output_feedback_control(cfg: ControllerConfig, sigma_hat: np.ndarray,
                            xi_hat: np.ndarray) -> np.ndarray:
    """Implementable law u = -Bhat^{-1} satv_l(sigma_hat + K xi_hat)."""
    arg = np.asarray(sigma_hat, dtype=float) + cfg.stabilizing_term(np.asarray(xi_hat, dtype=float))
    return -cfg.Bhat_inv @ satv(arg, cfg.sat_level, cfg.eps0)


@dataclass
class ImplicitSolution:
    """Fixed point of the implicit control equation with its iterate log."""

    u: np.ndarray
    residual: float
    gaps: List[float]
    converged: bool

    @property
    def contraction_ratios(self) -> List[float]:
        return [b / a for a, b in zip(self.gaps, self.gaps[1:]) if a > 0]


def solve_implicit_control(plant: PlantModel, cfg: ControllerConfig, state: PlantState,
                           sigma_tilde: np.ndarray, eta_weighted: np.ndarray,
                           tol: float = 1e-13, max_iter: int = 200) -> ImplicitSolution:
    """Solve u = -Bhat^{-1} satv_l(sigma(x,u) + K xi - sigma_tilde - eta_weighted).

    ``eta_weighted`` is the m-vector K (Lambda_ell^{-1} (x) C2) eta_tilde
    already reduced by the caller.  The iteration runs in w = Bhat u
    coordinates, where the map w -> -satv_l(a + Delta_b w + K xi - ...) is a
    contraction with factor at most mu0 whenever the gain deviation bound
    holds; non-convergence therefore signals a violated mu0 certificate.
    """
    x = state.flat()
    a = plant.a_eval(x)
    Delta_b = (plant.b_eval(x) - cfg.Bhat) @ cfg.Bhat_inv
    base = a + cfg.stabilizing_term(state.xi_flat()) \
        - np.asarray(sigma_tilde, dtype=float) - np.asarray(eta_weighted, dtype=float)
    w = np.zeros(cfg.m)
    gaps: List[float] = []
    converged = False
    for _ in range(max_iter):
        w_next = -satv(base + Delta_b @ w, cfg.sat_level, cfg.eps0)
        gap = float(np.linalg.norm(w_next - w))
        gaps.append(gap)
        w = w_next
        if gap < tol:
            converged = True
            break
    u = cfg.Bhat_inv @ w
    residual = float(np.linalg.norm(
        u + cfg.Bhat_inv @ satv(base + Delta_b @ (cfg.Bhat @ u), cfg.sat_level, cfg.eps0)))
    if not converged or residual >= 1e-10:
        raise ImplicitSolveError(
            f"implicit control did not converge (residual {residual:.3e} after "
            f"{len(gaps)} iterations); the mu0 bound may not hold at this state")
    return ImplicitSolution(u=u, residual=residual, gaps=gaps, converged=True)


def estimate_mu0(plant: PlantModel, Bhat: np.ndarray, sampler, n_samples: int,
                 rng: np.random.Generator, safety: float = 1.05) -> MuCertificate:
    """Sampled bound mu0 on |(b(x) - Bhat) Bhat^{-1}| over the sampler region.

    The sampled maximum is inflated by ``safety``; a result >= 1 means no
    constant Bhat-based design can dominate the gain deviation, so the
    assumption fails and an error is raised.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    Bhat = np.asarray(Bhat, dtype=float)
    Bhat_inv = np.linalg.inv(Bhat)
    xs = sampler.sample(n_samples, rng)
    worst, worst_x = -1.0, xs[0]
    for x in xs:
        dev = float(np.linalg.norm((plant.b_eval(x) - Bhat) @ Bhat_inv, 2))
        if dev > worst:
            worst, worst_x = dev, x
    mu0 = worst * safety
    if mu0 >= 1.0:
        raise AssumptionViolation(
            f"gain deviation bound fails: inflated mu0 = {mu0:.4f} >= 1 "
            f"(raw sampled max {worst:.4f})")
    return MuCertificate(mu0=mu0, region=sampler.describe(), sample_count=n_samples,
                         worst_sample=worst_x, raw_max=worst)
