"""Compiled integration kernels for the bundled plants.

The generic NumPy loop in :mod:`simulator` is fine for unit-test horizons,
but the high-gain profiles need ten-million-step runs, so the bundled
two-output example ships hand-specialized closed-loop and ideal-feedback
kernels.  The kernels must stay in exact agreement with the generic path;
the test suite cross-validates both backends on shared trajectories.

Numba is optional at import time: without it the same functions run as
plain Python (slow but correct), which keeps the package importable in
stripped-down environments.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    NUMBA_OK = True
except Exception:  # pragma: no cover - exercised only without numba
    NUMBA_OK = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]

__all__ = ["available", "run_closed_loop", "run_ideal", "pack_params_2x2"]

# state layout for the 2x2 bundled plant (17 entries):
#   0:2   x0
#   2:4   xi_1            4:7   xi_2
#   7:11  observer ch 1   (e1_11, e2_11, e1_12, e2_12)
#   11:17 observer ch 2   (e1_21, e2_21, e1_22, e2_22, e1_23, e2_23)
#
# parameter vector layout (27 entries):
#   0:10  gamma pairs  (ch1 blocks 1..2, ch2 blocks 1..3; each g1, g2)
#   10:12 ell_1, ell_2
#   12:14 K_1           14:17 K_2
#   17:21 Bhat row-major       21:25 Bhat^{-1} row-major
#   25    sat level            26    eps0


def pack_params_2x2(cfg, gains) -> np.ndarray:
    g = np.concatenate([gains.gamma[0].reshape(-1), gains.gamma[1].reshape(-1)])
    return np.concatenate([
        g, gains.ell,
        cfg.K_blocks[0], cfg.K_blocks[1],
        cfg.Bhat.reshape(-1), cfg.Bhat_inv.reshape(-1),
        [cfg.sat_level, cfg.eps0],
    ]).astype(np.float64)


@njit(cache=True)
def _sat_scalar(v, level, eps0):
    if v > level:
        return level + eps0 * np.tanh((v - level) / eps0)
    if v < -level:
        return -level - eps0 * np.tanh((-v - level) / eps0)
    return v


@njit(cache=True)
def _rhs_2x2(t, s, p, perturb, ds):
    l1 = p[10]
    l2 = p[11]
    level = p[25]
    eps0 = p[26]
    # estimates and saturated feedback
    arg1 = s[10] + p[12] * s[7] + p[13] * s[9]
    arg2 = s[16] + p[14] * s[11] + p[15] * s[13] + p[16] * s[15]
    sa1 = _sat_scalar(arg1, level, eps0)
    sa2 = _sat_scalar(arg2, level, eps0)
    u1 = -(p[21] * sa1 + p[22] * sa2)
    u2 = -(p[23] * sa1 + p[24] * sa2)
    # plant
    y1 = s[2]
    sb = np.sin(s[3]) / 3.0
    a1 = s[0] * s[4]
    a2 = s[1] + (np.sin(t) if perturb == 1 else 0.0)
    f1 = a1 + u1 + sb * u2
    f2 = a2 + u2
    d23 = np.cos(y1)
    ds[0] = -s[0] + s[1] * s[3] * u2 + s[3]
    ds[1] = -s[1] - s[0] * s[3] * u2 + s[2]
    ds[2] = s[3]
    ds[3] = f1
    ds[4] = s[5]
    ds[5] = s[6] + d23 * f1
    ds[6] = f2
    # observer bank
    b1u = p[17] * u1 + p[18] * u2
    b2u = p[19] * u1 + p[20] * u2
    e = y1 - s[7]
    ds[7] = s[8] + l1 * p[0] * e
    ds[8] = s[10] + b1u + l1 * l1 * p[1] * e
    e = s[8] - s[9]
    ds[9] = s[10] + b1u + l1 * p[2] * e
    ds[10] = l1 * l1 * p[3] * e
    s1c = s[10] + b1u          # channel-1 forcing estimate feeding channel 2
    e = s[4] - s[11]
    ds[11] = s[12] + l2 * p[4] * e
    ds[12] = s[14] + d23 * s1c + l2 * l2 * p[5] * e
    e = s[12] - s[13]
    ds[13] = s[14] + d23 * s1c + l2 * p[6] * e
    ds[14] = s[16] + b2u + l2 * l2 * p[7] * e
    e = s[14] - s[15]
    ds[15] = s[16] + b2u + l2 * p[8] * e
    ds[16] = l2 * l2 * p[9] * e


@njit(cache=True)
def _rhs_2x2_ideal(t, s, p, ds):
    # u* = b^{-1}(-a + v); for this plant b^{-1} = [[1, -sb], [0, 1]]
    sb = np.sin(s[3]) / 3.0
    a1 = s[0] * s[4]
    a2 = s[1]
    v1 = -(p[12] * s[2] + p[13] * s[3])
    v2 = -(p[14] * s[4] + p[15] * s[5] + p[16] * s[6])
    u1 = (-a1 + v1) - sb * (-a2 + v2)
    u2 = -a2 + v2
    f1 = a1 + u1 + sb * u2
    f2 = a2 + u2
    ds[0] = -s[0] + s[1] * s[3] * u2 + s[3]
    ds[1] = -s[1] - s[0] * s[3] * u2 + s[2]
    ds[2] = s[3]
    ds[3] = f1
    ds[4] = s[5]
    ds[5] = s[6] + np.cos(s[2]) * f1
    ds[6] = f2


@njit(cache=True)
def _integrate(s0, p, perturb, dt, n_steps, stride, escape2, nx_dim, ideal, rec):
    dim = s0.shape[0]
    s = s0.copy()
    k1 = np.zeros(dim)
    k2 = np.zeros(dim)
    k3 = np.zeros(dim)
    k4 = np.zeros(dim)
    tmp = np.zeros(dim)
    rec[0, 0] = 0.0
    for j in range(dim):
        rec[0, 1 + j] = s[j]
    nrec = 1
    t = 0.0
    for i in range(n_steps):
        if ideal == 1:
            _rhs_2x2_ideal(t, s, p, k1)
            for j in range(dim):
                tmp[j] = s[j] + 0.5 * dt * k1[j]
            _rhs_2x2_ideal(t + 0.5 * dt, tmp, p, k2)
            for j in range(dim):
                tmp[j] = s[j] + 0.5 * dt * k2[j]
            _rhs_2x2_ideal(t + 0.5 * dt, tmp, p, k3)
            for j in range(dim):
                tmp[j] = s[j] + dt * k3[j]
            _rhs_2x2_ideal(t + dt, tmp, p, k4)
        else:
            _rhs_2x2(t, s, p, perturb, k1)
            for j in range(dim):
                tmp[j] = s[j] + 0.5 * dt * k1[j]
            _rhs_2x2(t + 0.5 * dt, tmp, p, perturb, k2)
            for j in range(dim):
                tmp[j] = s[j] + 0.5 * dt * k2[j]
            _rhs_2x2(t + 0.5 * dt, tmp, p, perturb, k3)
            for j in range(dim):
                tmp[j] = s[j] + dt * k3[j]
            _rhs_2x2(t + dt, tmp, p, perturb, k4)
        for j in range(dim):
            s[j] = s[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        t = (i + 1) * dt
        nx2 = 0.0
        for j in range(nx_dim):
            nx2 += s[j] * s[j]
        if not np.isfinite(nx2) or nx2 > escape2:
            return nrec, 2, t
        if (i + 1) % stride == 0:
            rec[nrec, 0] = t
            for j in range(dim):
                rec[nrec, 1 + j] = s[j]
            nrec += 1
    if rec[nrec - 1, 0] < t:
        rec[nrec, 0] = t
        for j in range(dim):
            rec[nrec, 1 + j] = s[j]
        nrec += 1
    return nrec, 0, t


_KEYS = ("paper_2x2",)


def available(key: str) -> bool:
    return key in _KEYS


def _run(key, plant, cfg, gains, z0, dt, n_steps, stride, escape, perturb, ideal):
    if key not in _KEYS:
        raise KeyError(f"no compiled kernel registered under {key!r}")
    if ideal:
        p = np.zeros(27)
        p[12:14] = cfg.K_blocks[0]
        p[14:17] = cfg.K_blocks[1]
    else:
        p = pack_params_2x2(cfg, gains)
    dim = z0.shape[0]
    rec = np.zeros((n_steps // stride + 2, 1 + dim))
    nrec, status, t_end = _integrate(
        np.asarray(z0, dtype=np.float64), p, 1 if perturb else 0,
        float(dt), int(n_steps), int(stride), float(escape) ** 2,
        7, 1 if ideal else 0, rec)
    times = rec[:nrec, 0].copy()
    states = rec[:nrec, 1:].copy()
    return times, states, status, t_end


def run_closed_loop(key, plant, cfg, gains, z0, dt, n_steps, stride, escape, perturb):
    """Integrate the full output-feedback loop with the compiled kernel."""
    return _run(key, plant, cfg, gains, z0, dt, n_steps, stride, escape, perturb, False)


def run_ideal(key, plant, cfg, z0, dt, n_steps, stride, escape):
    """Integrate the full-state reference loop with the compiled kernel."""
    return _run(key, plant, cfg, None, z0, dt, n_steps, stride, escape, False, True)
