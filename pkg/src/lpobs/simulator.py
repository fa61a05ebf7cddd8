"""Fixed-step closed-loop simulation and trajectory recording.

The closed loop couples the plant chains, the observer bank and the
saturated output-feedback law into one stiff ODE whose fast rates scale
with the high-gain parameters; the classical 4-stage Runge-Kutta scheme is
used at a step bounded by c_stab / (ell_max * rho_hat), with rho_hat the
largest spectral radius of the observer interconnection blocks.  Fixed
stepping keeps runs bit-reproducible, the stability bound is computable a
priori from the gains, and the control is re-evaluated at every stage so
the coupled system retains full integration order.

Bundled plants carry a compiled fast path (see fastsim); everything else
runs through the generic NumPy loop.
"""

from __future__ import annotations

import hashlib
import json
import os
import time as _time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import fastsim
from .control_law import ControllerConfig, ideal_control, output_feedback_control
from .gain_design import GainCertificate, build_F, gain_cascade
from .normal_form import PlantModel, PlantState, plant_rhs
from .observer import (ObserverGains, ObserverState, error_coordinates,
                       extract_estimates, observer_rhs)

__all__ = [
    "IntegratorConfig", "Trajectory", "SimulationDiverged", "CertificateMissing",
    "rk4_step", "suggest_dt", "simulate_closed_loop", "simulate_ideal",
    "kappa_sweep", "SweepRow",
]

DEFAULT_ESCAPE_RADIUS = 1e6


class SimulationDiverged(RuntimeError):
    """Trajectory escaped or went non-finite; carries the partial record."""

    def __init__(self, message: str, t_div: float, trajectory: Optional["Trajectory"] = None):
        super().__init__(message)
        self.t_div = t_div
        self.trajectory = trajectory


class CertificateMissing(RuntimeError):
    """A closed-loop run was requested without a certificate or waiver."""


@dataclass
class IntegratorConfig:
    """Fixed-step integration settings.

    dt=None means "derive from the stability bound".  The bound itself is
    c_stab / (ell_max * rho_hat) and an explicit dt above it is rejected.
    """

    dt: Optional[float] = None
    t_final: float = 30.0
    record_stride: int = 1
    c_stab: float = 0.5
    escape_radius: float = DEFAULT_ESCAPE_RADIUS

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_final <= 0:
            raise ValueError("t_final must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be at least 1")


def rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], state: np.ndarray,
             t: float, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step.

    Raises SimulationDiverged when any stage evaluates non-finite.
    """
    k1 = rhs(t, state)
    k2 = rhs(t + 0.5 * dt, state + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, state + 0.5 * dt * k2)
    k4 = rhs(t + dt, state + dt * k3)
    out = state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationDiverged(f"non-finite stage value at t = {t:.6g}", t)
    return out


def suggest_dt(gains: ObserverGains, c_stab: float = 0.5) -> float:
    """Stability-bounded step c_stab / (ell_max * rho_hat).

    rho_hat is the largest spectral radius over the per-channel observer
    interconnection matrices; the fast modes of the coupled loop have rates
    about ell_k * rho(F_k).
    """
    rho = max(float(np.max(np.abs(np.linalg.eigvals(build_F(G))))) for G in gains.gamma)
    return c_stab / (float(np.max(gains.ell)) * rho)


@dataclass
class Trajectory:
    """Recorded closed-loop run: states, control and diagnostics."""

    times: np.ndarray
    x0: np.ndarray               # (N, n0)
    xi: np.ndarray               # (N, r_total)
    u: np.ndarray                # (N, m)
    normx: np.ndarray            # (N,)
    eta: Optional[np.ndarray] = None         # (N, 2 r_total)
    eta_tilde: Optional[np.ndarray] = None   # (N, 2 r_total)
    vx: Optional[np.ndarray] = None          # (N,) for ideal runs with a hook
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("recorded times must be strictly increasing")

    @property
    def final_normx(self) -> float:
        return float(self.normx[-1])

    def window(self, t_lo: float, t_hi: float) -> np.ndarray:
        """Boolean mask of samples with t_lo <= t <= t_hi."""
        return (self.times >= t_lo) & (self.times <= t_hi)

    def to_csv(self, path: str) -> None:
        """Write the trajectory; floats carry 17 significant digits."""
        n0 = self.x0.shape[1]
        m = self.u.shape[1]
        cols = ["t", "normx"]
        cols += [f"x0_{i+1}" for i in range(n0)]
        cols += list(self.manifest.get("xi_columns") or
                     [f"xi_{i+1}" for i in range(self.xi.shape[1])])
        cols += [f"u_{i+1}" for i in range(m)]
        blocks = [self.times[:, None], self.normx[:, None], self.x0, self.xi, self.u]
        if self.eta_tilde is not None:
            cols += list(self.manifest.get("etatilde_columns") or
                         [f"etatilde_{i+1}" for i in range(self.eta_tilde.shape[1])])
            blocks.append(self.eta_tilde)
        data = np.hstack(blocks)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in data:
                fh.write(",".join("%.17g" % v for v in row) + "\n")
        os.replace(tmp, path)

    def save_manifest(self, path: str) -> None:
        payload = dict(self.manifest)
        payload.pop("xi_columns", None)
        payload.pop("etatilde_columns", None)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def _xi_column_names(r: Sequence[int]) -> List[str]:
    return [f"xi_{k+1}_{j+1}" for k, rk in enumerate(r) for j in range(rk)]


def _etatilde_column_names(r: Sequence[int]) -> List[str]:
    out = []
    for k, rk in enumerate(r):
        for i in range(rk):
            out += [f"etatilde_{k+1}_{i+1}_1", f"etatilde_{k+1}_{i+1}_2"]
    return out


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _resolve_dt(gains: ObserverGains, integ: IntegratorConfig) -> float:
    bound = suggest_dt(gains, integ.c_stab)
    if integ.dt is None:
        return bound
    if integ.dt > bound * (1 + 1e-12):
        raise ValueError(
            f"dt = {integ.dt:g} exceeds the stability bound {bound:g} "
            f"(= c_stab / (ell_max * rho_hat) with c_stab = {integ.c_stab:g})")
    return integ.dt


def simulate_closed_loop(plant: PlantModel, cfg: ControllerConfig, gains: ObserverGains,
                         x_init: PlantState, eta_init: Optional[ObserverState],
                         integ: IntegratorConfig, disturb: bool = False,
                         certificate: Optional[GainCertificate] = None,
                         waive_certificate: bool = False,
                         record_eta_tilde: bool = False,
                         backend: str = "auto") -> Trajectory:
    """Integrate plant + observer bank + saturated output feedback.

    The control input is recomputed from the current bank state at every
    Runge-Kutta stage.  A certificate (or an explicit waiver) is required:
    simulating an uncertified design silently is how broken gain choices
    sneak into results.  Early termination past the escape radius raises
    SimulationDiverged carrying the partial trajectory.
    """
    gains.check_structure(plant.indices)
    if certificate is None and not waive_certificate:
        raise CertificateMissing(
            "no gain certificate supplied; pass certificate=... or waive explicitly")
    if certificate is not None:
        certificate.verify()
    if disturb and plant.disturbance is None:
        raise ValueError("disturbance run requested but the plant has no disturbance hook")
    idx = plant.indices
    if eta_init is None:
        eta_init = ObserverState.zero(idx.r)
    dt = _resolve_dt(gains, integ)
    n_steps = int(np.ceil(integ.t_final / dt - 1e-12))

    use_fast = backend == "fast" or (backend == "auto" and plant.fast_key is not None
                                     and fastsim.available(plant.fast_key))
    if backend == "fast" and not (plant.fast_key and fastsim.available(plant.fast_key)):
        raise ValueError("no compiled fast path registered for this plant")

    t_start = _time.perf_counter()
    if use_fast:
        z0 = np.concatenate([x_init.flat(), eta_init.flat()])
        times, states, status, t_end = fastsim.run_closed_loop(
            plant.fast_key, plant, cfg, gains, z0, dt, n_steps,
            integ.record_stride, integ.escape_radius, disturb)
    else:
        times, states, status, t_end = _python_closed_loop(
            plant, cfg, gains, x_init, eta_init, dt, n_steps,
            integ.record_stride, integ.escape_radius, disturb)

    traj = _assemble_trajectory(plant, cfg, gains, times, states, disturb,
                                record_eta_tilde)
    traj.manifest.update({
        "dt": dt,
        "t_final": integ.t_final,
        "record_stride": integ.record_stride,
        "backend": "fast" if use_fast else "python",
        "disturbance": bool(disturb),
        "runtime_s": _time.perf_counter() - t_start,
        "certificate": certificate.as_dict() if certificate is not None else "waived",
    })
    if status != 0:
        raise SimulationDiverged(
            f"|x| escaped beyond {integ.escape_radius:g} at t = {t_end:.6g}",
            t_end, traj)
    return traj


def _python_closed_loop(plant, cfg, gains, x_init, eta_init, dt, n_steps,
                        stride, escape, disturb):
    idx = plant.indices
    n = idx.n

    def rhs(t: float, z: np.ndarray) -> np.ndarray:
        state = PlantState.from_flat(idx, z[:n])
        eta = ObserverState.from_flat(idx.r, z[n:])
        xi_hat, sigma_hat = extract_estimates(eta)
        u = output_feedback_control(cfg, sigma_hat, xi_hat)
        d_state = plant_rhs(plant, state, u, t if disturb else None)
        d_eta = observer_rhs(plant, cfg, gains, eta, state.y, u)
        return np.concatenate([d_state.flat(), d_eta.flat()])

    z = np.concatenate([x_init.flat(), eta_init.flat()])
    rec_t = [0.0]
    rec_z = [z.copy()]
    t = 0.0
    for i in range(n_steps):
        z = rk4_step(rhs, z, t, dt)
        t = (i + 1) * dt
        nx = float(np.linalg.norm(z[:n]))
        if not np.isfinite(nx) or nx > escape:
            return np.array(rec_t), np.array(rec_z), 2, t
        if (i + 1) % stride == 0:
            rec_t.append(t)
            rec_z.append(z.copy())
    if rec_t[-1] < t:
        rec_t.append(t)
        rec_z.append(z.copy())
    return np.array(rec_t), np.array(rec_z), 0, t


def _assemble_trajectory(plant, cfg, gains, times, states, disturb, record_eta_tilde):
    idx = plant.indices
    n0, rt = idx.n0, idx.r_total
    x0 = states[:, :n0]
    xi = states[:, n0 : n0 + rt]
    eta = states[:, n0 + rt :]
    normx = np.linalg.norm(states[:, : n0 + rt], axis=1)
    m = idx.m
    u = np.empty((len(times), m))
    for i in range(len(times)):
        bank = ObserverState.from_flat(idx.r, eta[i])
        xi_hat, sigma_hat = extract_estimates(bank)
        u[i] = output_feedback_control(cfg, sigma_hat, xi_hat)
    eta_tilde = None
    if record_eta_tilde:
        eta_tilde = np.empty((len(times), 2 * rt))
        for i, t in enumerate(times):
            state = PlantState.from_flat(idx, states[i, : n0 + rt])
            bank = ObserverState.from_flat(idx.r, eta[i])
            err = error_coordinates(plant, cfg, gains, state, bank, u[i],
                                    t if disturb else None)
            eta_tilde[i] = err.flat()
    return Trajectory(times=times, x0=x0, xi=xi, u=u, normx=normx, eta=eta,
                      eta_tilde=eta_tilde,
                      manifest={"xi_columns": _xi_column_names(idx.r),
                                "etatilde_columns": _etatilde_column_names(idx.r)})


def simulate_ideal(plant: PlantModel, cfg: ControllerConfig, x_init: PlantState,
                   integ: IntegratorConfig, backend: str = "auto") -> Trajectory:
    """Integrate the plant under the full-state law (the performance
    reference an output-feedback design is meant to recover)."""
    idx = plant.indices
    dt = integ.dt if integ.dt is not None else min(1e-3, integ.t_final / 1000.0)
    n_steps = int(np.ceil(integ.t_final / dt - 1e-12))
    n = idx.n

    use_fast = backend == "fast" or (backend == "auto" and plant.fast_key is not None
                                     and fastsim.available(plant.fast_key))
    t_start = _time.perf_counter()
    if use_fast:
        times, states, status, t_end = fastsim.run_ideal(
            plant.fast_key, plant, cfg, x_init.flat(), dt, n_steps,
            integ.record_stride, integ.escape_radius)
    else:
        def rhs(t: float, z: np.ndarray) -> np.ndarray:
            state = PlantState.from_flat(idx, z)
            return plant_rhs(plant, state, ideal_control(plant, cfg, state)).flat()

        z = x_init.flat()
        rec_t, rec_z = [0.0], [z.copy()]
        t = 0.0
        status = 0
        for i in range(n_steps):
            z = rk4_step(rhs, z, t, dt)
            t = (i + 1) * dt
            nx = float(np.linalg.norm(z))
            if not np.isfinite(nx) or nx > integ.escape_radius:
                status = 2
                break
            if (i + 1) % integ.record_stride == 0:
                rec_t.append(t)
                rec_z.append(z.copy())
        if status == 0 and rec_t[-1] < t:
            rec_t.append(t)
            rec_z.append(z.copy())
        times, states, t_end = np.array(rec_t), np.array(rec_z), t

    x0 = states[:, : idx.n0]
    xi = states[:, idx.n0 :]
    normx = np.linalg.norm(states, axis=1)
    u = np.empty((len(times), idx.m))
    for i in range(len(times)):
        u[i] = ideal_control(plant, cfg, PlantState.from_flat(idx, states[i]))
    vx = None
    if plant.vx is not None:
        vx = np.array([plant.vx(states[i]) for i in range(len(times))])
    traj = Trajectory(times=times, x0=x0, xi=xi, u=u, normx=normx, vx=vx,
                      manifest={"xi_columns": _xi_column_names(idx.r),
                                "dt": dt, "t_final": integ.t_final,
                                "backend": "fast" if use_fast else "python",
                                "ideal": True,
                                "runtime_s": _time.perf_counter() - t_start})
    if status != 0:
        raise SimulationDiverged(f"ideal run escaped at t = {t_end:.6g}", t_end, traj)
    return traj


@dataclass
class SweepRow:
    kappa: float
    ell: np.ndarray
    steady_eta_tilde: float
    steady_normx: float
    runtime_s: float
    below_theta_star: Optional[bool] = None


def kappa_sweep(plant: PlantModel, cfg: ControllerConfig, gamma: List[np.ndarray],
                g: Sequence[float], kappas: Sequence[float], x_init: PlantState,
                t_final: float, theta_star: Optional[float] = None,
                c_stab: float = 0.5, record_points: int = 20_000,
                certificate: Optional[GainCertificate] = None) -> List[SweepRow]:
    """Closed-loop runs across kappa values with cascade-derived gains.

    For each kappa the high gains come from the cascade; the steady columns
    report the sup of |eta_tilde| and |x| over the final 20 percent of the
    horizon.  At least two kappa values are required for a scaling claim.
    """
    if len(kappas) < 2:
        raise ValueError("a kappa sweep needs at least two kappa values")
    idx = plant.indices
    rows: List[SweepRow] = []
    for kappa in kappas:
        ell = gain_cascade(g, float(kappa), idx.r)
        gains = ObserverGains(gamma=gamma, ell=ell)
        dt = suggest_dt(gains, c_stab)
        stride = max(1, int(np.ceil(t_final / dt / record_points)))
        integ = IntegratorConfig(dt=None, t_final=t_final, record_stride=stride,
                                 c_stab=c_stab)
        t0 = _time.perf_counter()
        traj = simulate_closed_loop(plant, cfg, gains, x_init, None, integ,
                                    certificate=certificate,
                                    waive_certificate=certificate is None,
                                    record_eta_tilde=True)
        elapsed = _time.perf_counter() - t0
        tail = traj.times >= 0.8 * t_final
        steady_eta = float(np.linalg.norm(traj.eta_tilde[tail], axis=1).max())
        steady_x = float(traj.normx[tail].max())
        rows.append(SweepRow(kappa=float(kappa), ell=ell, steady_eta_tilde=steady_eta,
                             steady_normx=steady_x, runtime_s=elapsed,
                             below_theta_star=(None if theta_star is None
                                               else bool(kappa < theta_star))))
    return rows
