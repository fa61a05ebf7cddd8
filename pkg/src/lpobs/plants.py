"""Bundled plants and their default design constants.

The registry holds natively-coded plants (fast to evaluate and, for the
two-output example, backed by compiled kernels) together with ready-to-run
configuration presets.  Config files refer to them as
``{"plant": {"bundled": "<name>"}}``; the DSL-defined twin of the
two-output example lives in the test corpus to cross-validate the
expression engine against these native hooks.
"""

from __future__ import annotations

import math
from typing import Dict

import numpy as np

from .normal_form import PlantModel, StructureIndices

__all__ = [
    "BUNDLED_PLANTS", "build_plant", "default_gamma", "bundled_config",
    "PAPER_PLANT", "PAPER_VX_MATRIX",
]

# default per-block injection gain pairs for the shipped chain orders;
# other orders must supply their own table (it is then Hurwitz-verified)
_GAMMA_R2 = np.array([[2.5, 4.6], [2.5, 1.533]])
_GAMMA_R3 = np.array([[2.5, 4.6], [2.5, 1.533], [2.5, 0.511]])

PAPER_PLANT = "paper_example_2x2"

# quadratic Lyapunov matrix of the ideally-controlled two-output example,
# block diagonal over (x0, xi_1, xi_2)
PAPER_VX_MATRIX = np.zeros((7, 7))
PAPER_VX_MATRIX[0, 0] = PAPER_VX_MATRIX[1, 1] = 0.5
PAPER_VX_MATRIX[2:4, 2:4] = 100.0 * np.array([[2.625, 2.0], [2.0, 2.5]])
PAPER_VX_MATRIX[4:7, 4:7] = np.array([
    [4.2266, 6.8594, 4.0],
    [6.8594, 15.875, 9.8125],
    [4.0, 9.8125, 6.875],
])


def default_gamma(r_k: int) -> np.ndarray:
    """Shipped injection gains for chain order r_k (2 or 3 only)."""
    if r_k == 2:
        return _GAMMA_R2.copy()
    if r_k == 3:
        return _GAMMA_R3.copy()
    raise ValueError(
        f"no default injection gains for chain order {r_k}; supply Gamma explicitly")


def _paper_plant() -> PlantModel:
    idx = StructureIndices(m=2, n0=2, r=(2, 3))

    def f0(x0, xi, u):
        return np.array([
            -x0[0] + x0[1] * xi[1] * u[1] + xi[1],
            -x0[1] - x0[0] * xi[1] * u[1] + xi[0],
        ])

    def a(x):
        return np.array([x[0] * x[4], x[1]])

    def b(x):
        return np.array([[1.0, math.sin(x[3]) / 3.0], [0.0, 1.0]])

    def delta_23(y):
        return math.cos(y[0])

    def disturbance(t):
        return np.array([0.0, math.sin(t)])

    P = PAPER_VX_MATRIX

    def vx(x):
        return float(x @ P @ x)

    return PlantModel(indices=idx, f0=f0, a=a, b=b,
                      delta={(2, 1, 3): delta_23},
                      disturbance=disturbance, name=PAPER_PLANT,
                      vx=vx, vx_quadratic=P, fast_key="paper_2x2")


def _linear_siso() -> PlantModel:
    idx = StructureIndices(m=1, n0=0, r=(2,))
    return PlantModel(
        indices=idx,
        f0=lambda x0, xi, u: np.zeros(0),
        a=lambda x: np.zeros(1),
        b=lambda x: np.eye(1),
        name="linear_siso")


def _linear_2x3() -> PlantModel:
    idx = StructureIndices(m=2, n0=0, r=(2, 3))
    return PlantModel(
        indices=idx,
        f0=lambda x0, xi, u: np.zeros(0),
        a=lambda x: np.zeros(2),
        b=lambda x: np.eye(2),
        delta={(2, 1, 3): lambda y: 0.5},
        name="linear_2x3")


BUNDLED_PLANTS = {
    PAPER_PLANT: _paper_plant,
    "linear_siso": _linear_siso,
    "linear_2x3": _linear_2x3,
}


def build_plant(name: str) -> PlantModel:
    try:
        return BUNDLED_PLANTS[name]()
    except KeyError:
        raise KeyError(
            f"unknown bundled plant {name!r}; available: {sorted(BUNDLED_PLANTS)}") from None


def bundled_config(name: str) -> Dict:
    """Complete default configuration for a bundled plant."""
    if name == PAPER_PLANT:
        return {
            "plant": {"bundled": PAPER_PLANT},
            "controller": {
                "Bhat": [[1.0, 0.0], [0.0, 1.0]],
                "poles": [[-0.5, -0.5], [-0.5, -0.5, -0.5]],
                "eps0": 0.5,
                "sat_level": 25.0,
                "mu0": 1.0 / 3.0,
                "mu0_region_halfwidth": 5.0,
                "invariant_level": 3.0,      # sublevel value c + 1 with c = 2
            },
            "observer": {
                "Gamma": "default",
                "cascade": {"g": [12.5, 1.0], "kappa": 200.0},
            },
            "integrator": {
                "dt": "auto",
                "t_final": 30.0,
                "record_stride": 2000,
                "c_stab": 0.5,
            },
            "scenario": {
                "x0": [1.0, 1.0],
                "xi": [[0.0, 0.0], [0.0, 0.0, 0.0]],
                "eta0": "zero",
                "disturb": False,
                "seed": 0,
            },
        }
    if name == "linear_siso":
        return {
            "plant": {"bundled": "linear_siso"},
            "controller": {"Bhat": [[1.0]], "poles": [[-0.5, -0.5]],
                           "eps0": 0.5, "sat_level": 10.0, "mu0": 0.05,
                           "mu0_region_halfwidth": 5.0},
            "observer": {"Gamma": "default", "ell": [20.0]},
            "integrator": {"dt": "auto", "t_final": 10.0, "record_stride": 10,
                           "c_stab": 0.5},
            "scenario": {"x0": [], "xi": [[1.0, 0.0]], "eta0": "zero",
                         "disturb": False, "seed": 0},
        }
    if name == "linear_2x3":
        return {
            "plant": {"bundled": "linear_2x3"},
            "controller": {"Bhat": [[1.0, 0.0], [0.0, 1.0]],
                           "poles": [[-0.5, -0.5], [-0.5, -0.5, -0.5]],
                           "eps0": 0.5, "sat_level": 10.0, "mu0": 0.05,
                           "mu0_region_halfwidth": 5.0},
            "observer": {"Gamma": "default", "ell": [50.0, 20.0]},
            "integrator": {"dt": "auto", "t_final": 10.0, "record_stride": 10,
                           "c_stab": 0.5},
            "scenario": {"x0": [], "xi": [[0.5, 0.0], [0.5, 0.0, 0.0]],
                         "eta0": "zero", "disturb": False, "seed": 0},
        }
    raise KeyError(f"no bundled configuration for {name!r}")


# simulation profiles for the two-output example: the full-gain profile is
# the reference high-gain design, the reduced-gain profile keeps CI fast
PAPER_PROFILES: Dict[str, Dict] = {
    "full": {
        "observer": {"Gamma": "default", "cascade": {"g": [12.5, 1.0], "kappa": 200.0}},
        "integrator": {"dt": "auto", "t_final": 30.0, "record_stride": 2000,
                       "c_stab": 0.5},
    },
    "ci": {
        "observer": {"Gamma": "default", "cascade": {"g": [2.0, 1.0], "kappa": 50.0}},
        # dt = 1e-4 sits above the default bound; c_stab = 1.1 admits it and
        # the resulting |eigenvalue| * dt ~= 1.08 is still inside the RK4
        # stability region (verified empirically in the test suite)
        "integrator": {"dt": 1e-4, "t_final": 30.0, "record_stride": 10,
                       "c_stab": 1.1},
    },
}
