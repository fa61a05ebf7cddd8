"""JSON run-configuration loading and validation.

A run configuration has five sections (plant, controller, observer,
integrator, scenario) plus an optional output section.  Validation is
strict: unknown keys are rejected with their full path, expression strings
are parsed and bound against the declared structure immediately, and the
observer section must carry exactly one of an explicit high-gain list or
cascade inputs (g, kappa).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import expr as ex
from .control_law import ControllerConfig
from .gain_design import gain_cascade
from .normal_form import PlantModel, PlantState, StructureIndices
from .observer import ObserverGains, ObserverState
from .plants import BUNDLED_PLANTS, PAPER_PLANT, PAPER_PROFILES, build_plant, \
    bundled_config, default_gamma
from .simulator import IntegratorConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "apply_profile"]


class ConfigError(ValueError):
    """Configuration rejected; the message carries the offending path."""


def _check_keys(d: dict, allowed: Sequence[str], path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown} (allowed: {sorted(allowed)})")


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}.{key} is required")
    return d[key]


def _floats(v, path: str) -> np.ndarray:
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected numbers") from None
    return arr


@dataclass
class Scenario:
    x_init: PlantState
    eta_init: ObserverState
    disturb: bool
    seed: int


@dataclass
class RunConfig:
    """Validated configuration ready to drive simulation and design."""

    raw: dict
    plant: PlantModel
    controller: ControllerConfig
    gains: ObserverGains
    integrator: IntegratorConfig
    scenario: Scenario
    output_dir: Optional[str] = None
    mu0: Optional[float] = None
    mu0_region_halfwidth: float = 5.0
    invariant_level: Optional[float] = None
    cascade: Optional[Tuple[np.ndarray, float]] = None   # (g, kappa)
    name: str = "run"


def load_config(path: str) -> RunConfig:
    """Load and validate a JSON configuration file (or bundled name)."""
    if path in BUNDLED_PLANTS:
        return parse_config(bundled_config(path), name=path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    name = path.rsplit("/", 1)[-1]
    if name.endswith(".json"):
        name = name[:-5]
    return parse_config(raw, name=name)


def apply_profile(raw: dict, profile: str) -> dict:
    """Overlay a bundled simulation profile onto a raw configuration."""
    plant_sec = raw.get("plant", {})
    if plant_sec.get("bundled") != PAPER_PLANT:
        if profile != "full":
            raise ConfigError(f"profile {profile!r} is only defined for {PAPER_PLANT}")
        return raw
    if profile not in PAPER_PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; available: {sorted(PAPER_PROFILES)}")
    out = copy.deepcopy(raw)
    for section, patch in PAPER_PROFILES[profile].items():
        out[section] = copy.deepcopy(patch)
    return out


def parse_config(raw: dict, name: str = "run") -> RunConfig:
    _check_keys(raw, ["plant", "controller", "observer", "integrator",
                      "scenario", "output"], "config")
    plant_sec = _need(raw, "plant", "config")
    bundled = plant_sec.get("bundled") if isinstance(plant_sec, dict) else None
    if bundled is not None:
        defaults = bundled_config(bundled)
        merged = {**defaults, **{k: v for k, v in raw.items() if k != "plant"}}
        merged["plant"] = plant_sec
        raw = merged

    plant = _parse_plant(raw["plant"])
    controller_sec = _need(raw, "controller", "config")
    controller, mu0, halfwidth, level = _parse_controller(controller_sec, plant)
    gains, cascade = _parse_observer(_need(raw, "observer", "config"), plant)
    integ = _parse_integrator(_need(raw, "integrator", "config"))
    scenario = _parse_scenario(_need(raw, "scenario", "config"), plant)
    output_dir = None
    if "output" in raw:
        _check_keys(raw["output"], ["dir"], "output")
        output_dir = raw["output"].get("dir")
    return RunConfig(raw=raw, plant=plant, controller=controller, gains=gains,
                     integrator=integ, scenario=scenario, output_dir=output_dir,
                     mu0=mu0, mu0_region_halfwidth=halfwidth,
                     invariant_level=level, cascade=cascade, name=name)


def _parse_plant(sec: dict) -> PlantModel:
    if "bundled" in sec:
        _check_keys(sec, ["bundled"], "plant")
        try:
            return build_plant(sec["bundled"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    _check_keys(sec, ["indices", "f0", "a", "b", "delta", "disturbance"], "plant")
    idx_sec = _need(sec, "indices", "plant")
    _check_keys(idx_sec, ["n0", "r"], "plant.indices")
    try:
        idx = StructureIndices(m=len(idx_sec["r"]), n0=int(idx_sec["n0"]),
                               r=tuple(int(v) for v in _need(idx_sec, "r", "plant.indices")))
    except Exception as exc:
        raise ConfigError(f"plant.indices: {exc}") from None

    def compile_one(text: str, allowed, path: str) -> ex.Expr:
        if not isinstance(text, str):
            raise ConfigError(f"{path}: expected an expression string")
        try:
            tree = ex.parse(text)
            ex.bind_check(tree, idx.n0, idx.r, allowed)
        except ex.ExprError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return tree

    f0_src = _need(sec, "f0", "plant")
    if len(f0_src) != idx.n0:
        raise ConfigError(f"plant.f0: expected {idx.n0} expressions, got {len(f0_src)}")
    f0_trees = [compile_one(s, ("x0", "xi", "y", "u"), f"plant.f0[{i}]")
                for i, s in enumerate(f0_src)]
    a_src = _need(sec, "a", "plant")
    if len(a_src) != idx.m:
        raise ConfigError(f"plant.a: expected {idx.m} expressions, got {len(a_src)}")
    a_trees = [compile_one(s, ("x0", "xi", "y"), f"plant.a[{i}]")
               for i, s in enumerate(a_src)]
    b_src = _need(sec, "b", "plant")
    if len(b_src) != idx.m or any(len(row) != idx.m for row in b_src):
        raise ConfigError(f"plant.b: expected an {idx.m}x{idx.m} expression matrix")
    b_trees = [[compile_one(s, ("x0", "xi", "y"), f"plant.b[{i}][{j}]")
                for j, s in enumerate(row)] for i, row in enumerate(b_src)]
    delta_trees: Dict[Tuple[int, int, int], ex.Expr] = {}
    for rec_i, rec in enumerate(sec.get("delta", [])):
        _check_keys(rec, ["k", "i", "j", "expr"], f"plant.delta[{rec_i}]")
        key = (int(_need(rec, "k", f"plant.delta[{rec_i}]")),
               int(_need(rec, "i", f"plant.delta[{rec_i}]")),
               int(_need(rec, "j", f"plant.delta[{rec_i}]")))
        delta_trees[key] = compile_one(_need(rec, "expr", f"plant.delta[{rec_i}]"),
                                       ("y",), f"plant.delta[{rec_i}].expr")
    dist_trees = None
    if "disturbance" in sec:
        dist_src = sec["disturbance"]
        if len(dist_src) != idx.m:
            raise ConfigError(f"plant.disturbance: expected {idx.m} expressions")
        dist_trees = [compile_one(s, ("t",), f"plant.disturbance[{i}]")
                      for i, s in enumerate(dist_src)]

    def split_xi(xi_flat: np.ndarray) -> List[np.ndarray]:
        parts, off = [], 0
        for rk in idx.r:
            parts.append(xi_flat[off : off + rk])
            off += rk
        return parts

    def env_for_state(x_flat: np.ndarray, u=None, t=None) -> ex.EvalEnv:
        xi_flat = x_flat[idx.n0 :]
        xi = split_xi(xi_flat)
        y = np.array([c[0] for c in xi])
        return ex.EvalEnv(x0=x_flat[: idx.n0], xi=xi, y=y, u=u, t=t)

    def f0(x0, xi_flat, u):
        xi = split_xi(np.asarray(xi_flat, dtype=float))
        env = ex.EvalEnv(x0=x0, xi=xi, y=np.array([c[0] for c in xi]), u=u)
        return np.array([ex.evaluate(e, env) for e in f0_trees])

    def a(x_flat):
        env = env_for_state(np.asarray(x_flat, dtype=float))
        return np.array([ex.evaluate(e, env) for e in a_trees])

    def b(x_flat):
        env = env_for_state(np.asarray(x_flat, dtype=float))
        return np.array([[ex.evaluate(e, env) for e in row] for row in b_trees])

    delta_hooks = {}
    for key, tree in delta_trees.items():
        def hook(y, _tree=tree):
            return ex.evaluate(_tree, ex.EvalEnv(y=np.asarray(y, dtype=float)))
        delta_hooks[key] = hook
    disturbance = None
    if dist_trees is not None:
        def disturbance(t, _trees=dist_trees):
            env = ex.EvalEnv(t=float(t))
            return np.array([ex.evaluate(e, env) for e in _trees])
    try:
        return PlantModel(indices=idx, f0=f0, a=a, b=b, delta=delta_hooks,
                          disturbance=disturbance, name="expression-plant")
    except Exception as exc:
        raise ConfigError(f"plant: {exc}") from None


def _parse_controller(sec: dict, plant: PlantModel):
    _check_keys(sec, ["Bhat", "poles", "K", "eps0", "sat_level", "mu0",
                      "mu0_region_halfwidth", "invariant_level"], "controller")
    m = plant.indices.m
    Bhat = _floats(_need(sec, "Bhat", "controller"), "controller.Bhat")
    if Bhat.shape != (m, m):
        raise ConfigError(f"controller.Bhat must be {m}x{m}")
    if ("poles" in sec) == ("K" in sec):
        raise ConfigError("controller: give exactly one of 'poles' or 'K'")
    if "poles" in sec:
        from .gain_design import design_K
        poles = sec["poles"]
        if len(poles) != m:
            raise ConfigError(f"controller.poles: expected {m} pole lists")
        try:
            K_blocks = [design_K(plant.indices.r[k], _floats(p, f"controller.poles[{k}]"))
                        for k, p in enumerate(poles)]
        except ValueError as exc:
            raise ConfigError(f"controller.poles: {exc}") from None
    else:
        K_blocks = [_floats(row, f"controller.K[{k}]") for k, row in enumerate(sec["K"])]
        if len(K_blocks) != m or any(K_blocks[k].size != plant.indices.r[k] for k in range(m)):
            raise ConfigError("controller.K: block sizes must match the chain orders")
    if "sat_level" not in sec:
        raise ConfigError(
            "controller.sat_level is required (run the design command to size it)")
    try:
        cfg = ControllerConfig(Bhat=Bhat, K_blocks=K_blocks,
                               sat_level=float(sec["sat_level"]),
                               eps0=float(sec.get("eps0", 0.5)))
    except ValueError as exc:
        raise ConfigError(f"controller: {exc}") from None
    mu0 = float(sec["mu0"]) if "mu0" in sec else None
    if mu0 is not None and not 0 < mu0 < 1:
        raise ConfigError("controller.mu0 must lie in (0, 1)")
    halfwidth = float(sec.get("mu0_region_halfwidth", 5.0))
    level = float(sec["invariant_level"]) if "invariant_level" in sec else None
    return cfg, mu0, halfwidth, level


def _parse_observer(sec: dict, plant: PlantModel):
    _check_keys(sec, ["Gamma", "ell", "cascade"], "observer")
    idx = plant.indices
    gamma_spec = sec.get("Gamma", "default")
    if gamma_spec == "default":
        try:
            gamma = [default_gamma(rk) for rk in idx.r]
        except ValueError as exc:
            raise ConfigError(f"observer.Gamma: {exc}") from None
    else:
        if len(gamma_spec) != idx.m:
            raise ConfigError(f"observer.Gamma: expected {idx.m} channel tables")
        gamma = [_floats(t, f"observer.Gamma[{k}]") for k, t in enumerate(gamma_spec)]
    has_ell = "ell" in sec
    has_cascade = "cascade" in sec
    if has_ell == has_cascade:
        raise ConfigError(
            "observer: give exactly one of an explicit 'ell' list or 'cascade' "
            "inputs {g, kappa}, not both and not neither")
    cascade = None
    if has_cascade:
        _check_keys(sec["cascade"], ["g", "kappa"], "observer.cascade")
        g = _floats(_need(sec["cascade"], "g", "observer.cascade"), "observer.cascade.g")
        kappa = float(_need(sec["cascade"], "kappa", "observer.cascade"))
        try:
            ell = gain_cascade(g, kappa, idx.r)
        except ValueError as exc:
            raise ConfigError(f"observer.cascade: {exc}") from None
        cascade = (g, kappa)
    else:
        ell = _floats(sec["ell"], "observer.ell")
        if ell.shape != (idx.m,):
            raise ConfigError(f"observer.ell: expected {idx.m} values")
    try:
        gains = ObserverGains(gamma=gamma, ell=ell)
        gains.check_structure(idx)
    except Exception as exc:
        raise ConfigError(f"observer: {exc}") from None
    from .gain_design import build_F, is_hurwitz
    for k, G in enumerate(gains.gamma, start=1):
        if not is_hurwitz(build_F(G)):
            raise ConfigError(f"observer.Gamma channel {k} does not yield a Hurwitz bank")
    return gains, cascade


def _parse_integrator(sec: dict) -> IntegratorConfig:
    _check_keys(sec, ["dt", "t_final", "record_stride", "c_stab", "escape_radius"],
                "integrator")
    dt = sec.get("dt", "auto")
    if dt == "auto":
        dt = None
    elif dt is not None:
        dt = float(dt)
    try:
        return IntegratorConfig(
            dt=dt,
            t_final=float(_need(sec, "t_final", "integrator")),
            record_stride=int(sec.get("record_stride", 1)),
            c_stab=float(sec.get("c_stab", 0.5)),
            escape_radius=float(sec.get("escape_radius", 1e6)))
    except ValueError as exc:
        raise ConfigError(f"integrator: {exc}") from None


def _parse_scenario(sec: dict, plant: PlantModel) -> Scenario:
    _check_keys(sec, ["x0", "xi", "eta0", "disturb", "seed"], "scenario")
    idx = plant.indices
    x0 = _floats(sec.get("x0", []), "scenario.x0")
    if x0.shape != (idx.n0,):
        raise ConfigError(f"scenario.x0: expected {idx.n0} values")
    xi_spec = _need(sec, "xi", "scenario")
    if len(xi_spec) != idx.m:
        raise ConfigError(f"scenario.xi: expected {idx.m} channel lists")
    xi = []
    for k, part in enumerate(xi_spec):
        arr = _floats(part, f"scenario.xi[{k}]")
        if arr.shape != (idx.r[k],):
            raise ConfigError(f"scenario.xi[{k}]: expected {idx.r[k]} values")
        xi.append(arr)
    eta_spec = sec.get("eta0", "zero")
    if eta_spec == "zero":
        eta = ObserverState.zero(idx.r)
    else:
        try:
            eta = ObserverState.from_flat(idx.r, _floats(eta_spec, "scenario.eta0"))
        except ValueError as exc:
            raise ConfigError(f"scenario.eta0: {exc}") from None
    disturb = bool(sec.get("disturb", False))
    if disturb and plant.disturbance is None:
        raise ConfigError("scenario.disturb: the plant defines no disturbance hook")
    return Scenario(x_init=PlantState(x0=x0, xi=xi), eta_init=eta,
                    disturb=disturb, seed=int(sec.get("seed", 0)))
