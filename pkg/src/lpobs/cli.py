"""Command-line entry point.

Three subcommands cover the workflow:

* ``simulate`` integrates the closed loop (or the full-state reference with
  ``--ideal``) and writes a trajectory CSV plus a JSON manifest;
* ``design`` runs the whole certification pipeline and emits the gain
  certificate with its sample evidence;
* ``sweep`` re-runs the closed loop across kappa values with cascade-sized
  high gains and tabulates the steady estimation errors.

Exit codes: 0 success/bounded run, 1 configuration error, 2 divergence,
3 certificate failure.  The default output directory is $LPOBS_OUT_DIR or
the working directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_profile, load_config, parse_config
from .control_law import AssumptionViolation, MuCertificate, estimate_mu0
from .gain_design import CertificateError, GainCertificate, run_design_pipeline
from .sampling import BoxSampler, SublevelSampler, quadratic_form_box
from .simulator import (CertificateMissing, SimulationDiverged, Trajectory,
                        config_hash, kappa_sweep, simulate_closed_loop,
                        simulate_ideal)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_CERTIFICATE = 3


def _out_dir(flag: Optional[str], run: RunConfig) -> str:
    path = flag or run.output_dir or os.environ.get("LPOBS_OUT_DIR") or "."
    os.makedirs(path, exist_ok=True)
    return path


def _load(args) -> RunConfig:
    run = load_config(args.config)
    profile = getattr(args, "profile", None)
    if profile:
        run = parse_config(apply_profile(run.raw, profile), name=run.name)
    return run


def _region_sampler(run: RunConfig):
    plant = run.plant
    if plant.vx is None or run.invariant_level is None:
        return None
    if plant.vx_quadratic is not None:
        lo, hi = quadratic_form_box(plant.vx_quadratic, run.invariant_level)
    else:
        width = 10.0 * np.ones(plant.indices.n)
        lo, hi = -width, width
    return SublevelSampler(vx=plant.vx, level=run.invariant_level,
                           box=BoxSampler(lo, hi), label="invariant-region")


def _mu_certificate(run: RunConfig, rng: np.random.Generator,
                    n_samples: int) -> MuCertificate:
    plant = run.plant
    half = run.mu0_region_halfwidth
    box = BoxSampler(-half * np.ones(plant.indices.n), half * np.ones(plant.indices.n))
    sampled = estimate_mu0(plant, run.controller.Bhat, box, n_samples, rng,
                           safety=1.0 if run.mu0 is not None else 1.05)
    if run.mu0 is None:
        return sampled
    if sampled.raw_max > run.mu0 + 1e-9:
        raise CertificateError(
            f"configured mu0 = {run.mu0:.6g} is contradicted by a sampled "
            f"deviation of {sampled.raw_max:.6g}")
    return MuCertificate(mu0=run.mu0, region=sampled.region + " (configured bound)",
                         sample_count=sampled.sample_count,
                         worst_sample=sampled.worst_sample, raw_max=sampled.raw_max)


def _design(run: RunConfig, n_samples: int, quad_samples: int):
    rng = np.random.default_rng(run.scenario.seed)
    region = _region_sampler(run)
    if region is None:
        raise CertificateError(
            "the design pipeline needs an invariant-region description "
            "(bundled plants carry one; expression plants cannot be certified yet)")
    mu_cert = _mu_certificate(run, rng, n_samples)
    kappa = run.cascade[1] if run.cascade is not None else None
    return run_design_pipeline(run.plant, run.controller, run.gains, region,
                               mu_cert, rng, n_samples=n_samples,
                               n_quadratic_samples=quad_samples, kappa=kappa)


def _write_outputs(traj: Trajectory, run: RunConfig, out: str, tag: str) -> str:
    base = os.path.join(out, run.name + (f"_{tag}" if tag else ""))
    traj.manifest.update({
        "config": run.raw,
        "config_hash": config_hash(run.raw),
        "seed": run.scenario.seed,
        "version": __version__,
    })
    traj.to_csv(base + ".csv")
    traj.save_manifest(base + ".manifest.json")
    return base


def cmd_simulate(args) -> int:
    try:
        run = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args.out, run)

    if args.ideal:
        try:
            traj = simulate_ideal(run.plant, run.controller, run.scenario.x_init,
                                  run.integrator)
        except SimulationDiverged as exc:
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        base = _write_outputs(traj, run, out, "ideal")
        print(f"wrote {base}.csv  (|x(T)| = {traj.final_normx:.6g})")
        return EXIT_OK

    certificate: Optional[GainCertificate] = None
    if args.certificate:
        try:
            with open(args.certificate) as fh:
                certificate = GainCertificate.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError, CertificateError) as exc:
            print(f"certificate rejected: {exc}", file=sys.stderr)
            return EXIT_CERTIFICATE
    elif not args.waive_certificate:
        try:
            certificate, _ = _design(run, n_samples=args.design_samples,
                                     quad_samples=2000)
        except (CertificateError, AssumptionViolation) as exc:
            print(f"certificate failure: {exc}", file=sys.stderr)
            print("(re-run with --waive-certificate to simulate anyway)",
                  file=sys.stderr)
            return EXIT_CERTIFICATE

    disturb = args.perturb or run.scenario.disturb
    try:
        traj = simulate_closed_loop(
            run.plant, run.controller, run.gains, run.scenario.x_init,
            run.scenario.eta_init, run.integrator, disturb=disturb,
            certificate=certificate, waive_certificate=certificate is None,
            record_eta_tilde=args.eta_tilde)
    except SimulationDiverged as exc:
        if exc.trajectory is not None:
            _write_outputs(exc.trajectory, run, out, "diverged")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CertificateMissing, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    tag = "perturbed" if disturb else ""
    base = _write_outputs(traj, run, out, tag)
    print(f"wrote {base}.csv  (|x(T)| = {traj.final_normx:.6g}, "
          f"dt = {traj.manifest['dt']:.3g}, backend = {traj.manifest['backend']})")
    return EXIT_OK


def cmd_design(args) -> int:
    try:
        run = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args.out, run)
    try:
        cert, report = _design(run, n_samples=args.samples,
                               quad_samples=args.quadratic_samples)
    except (CertificateError, AssumptionViolation) as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    path = os.path.join(out, run.name + ".certificate.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(cert.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    print(f"wrote {path}")
    if args.report:
        _print_report(report)
    return EXIT_OK


def _print_report(report: dict) -> None:
    hur = " ".join("ok" if h else "FAIL" for h in report["hurwitz_F"])
    print("design report")
    print(f"  mu0                      : {report['mu0']:.6g}")
    print(f"  observer banks Hurwitz   : {hur}")
    peaks = ", ".join(f"{p:.4f}" for p in report["loop_gain_peaks"])
    print(f"  loop gain peaks          : {peaks}  (bound {report['loop_gain_bound']:.4f})")
    lams = ", ".join(f"{v:.3e}" for v in report["lambdas"])
    print(f"  decay rates lambda       : {lams}")
    print(f"  saturation level         : {report['saturation_level_configured']:g} "
          f"configured  ({report['saturation_level_estimate']:g} minimal estimate)")
    for key, val in report["iota"].items():
        print(f"  iota[{key}]                : {val:.4f}")
    print(f"  delta1 / delta2          : {report['delta1']:.4g} / {report['delta2']:.4g}")
    print(f"  rho0 / rho1              : {report['rho0']:.4g} / {report['rho1']:.4g}")
    g = ", ".join(f"{v:.4g}" for v in report["g"])
    print(f"  cascade coefficients g   : {g}")
    print(f"  threshold theta*         : {report['theta_star']:.4g}")
    print(f"  kappa used               : {report['kappa']:.4g}")
    ell_c = ", ".join(f"{v:.4g}" for v in report["ell_certified"])
    ell_u = ", ".join(f"{v:.4g}" for v in report["ell_configured"])
    print(f"  ell (certified cascade)  : {ell_c}")
    print(f"  ell (configured)         : {ell_u}")


def cmd_sweep(args) -> int:
    try:
        run = _load(args)
        kappas = [float(v) for v in args.kappa.split(",") if v.strip()]
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if len(kappas) < 2:
        print("usage error: --kappa needs at least two comma-separated values",
              file=sys.stderr)
        return EXIT_CONFIG
    if run.cascade is None:
        print("config error: kappa sweeps need observer.cascade inputs {g, kappa}",
              file=sys.stderr)
        return EXIT_CONFIG
    theta_star = args.theta_star
    if theta_star is None and run.plant.vx is not None:
        try:
            cert, _ = _design(run, n_samples=500, quad_samples=2000)
            theta_star = cert.theta_star
        except (CertificateError, AssumptionViolation) as exc:
            print(f"certificate failure: {exc}", file=sys.stderr)
            return EXIT_CERTIFICATE
    out = _out_dir(args.out, run)
    g, _ = run.cascade
    try:
        rows = kappa_sweep(run.plant, run.controller, run.gains.gamma, g, kappas,
                           run.scenario.x_init, t_final=args.t_final,
                           theta_star=theta_star, c_stab=run.integrator.c_stab)
    except SimulationDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    path = os.path.join(out, run.name + ".sweep.csv")
    m = run.plant.indices.m
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        cols = ["kappa"] + [f"ell_{i+1}" for i in range(m)] \
            + ["steady_eta_tilde", "steady_normx", "runtime_s", "below_theta_star"]
        fh.write(",".join(cols) + "\n")
        for row in rows:
            flag = "" if row.below_theta_star is None else str(int(row.below_theta_star))
            fh.write(",".join(["%.17g" % row.kappa]
                              + ["%.17g" % v for v in row.ell]
                              + ["%.17g" % row.steady_eta_tilde,
                                 "%.17g" % row.steady_normx,
                                 "%.6g" % row.runtime_s, flag]) + "\n")
    os.replace(tmp, path)
    print(f"wrote {path}")
    for row in rows:
        warn = "  (below theta*)" if row.below_theta_star else ""
        print(f"  kappa={row.kappa:g}: steady |eta~| = {row.steady_eta_tilde:.4e}, "
              f"steady |x| = {row.steady_normx:.4e}{warn}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpobs",
        description="Observer-based output-feedback stabilizer toolbox")
    parser.add_argument("--version", action="version", version=f"lpobs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="integrate the closed loop")
    sim.add_argument("config", help="config JSON path or bundled plant name")
    sim.add_argument("--perturb", action="store_true",
                     help="enable the plant's additive disturbance")
    sim.add_argument("--ideal", action="store_true",
                     help="run the full-state reference law instead")
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--profile", choices=("full", "ci"), default=None,
                     help="bundled gain/integrator profile")
    sim.add_argument("--certificate", default=None,
                     help="gain certificate JSON from a design run")
    sim.add_argument("--waive-certificate", action="store_true",
                     help="simulate without any certificate")
    sim.add_argument("--eta-tilde", action="store_true",
                     help="record rescaled estimation errors")
    sim.add_argument("--design-samples", type=int, default=500,
                     help="sample count for the implicit design pass")
    sim.set_defaults(func=cmd_simulate)

    des = sub.add_parser("design", help="run the gain certification pipeline")
    des.add_argument("config", help="config JSON path or bundled plant name")
    des.add_argument("--report", action="store_true", help="print a readable report")
    des.add_argument("--out", default=None, help="output directory")
    des.add_argument("--profile", choices=("full", "ci"), default=None)
    des.add_argument("--samples", type=int, default=2000,
                     help="Monte-Carlo samples for the scalar bounds")
    des.add_argument("--quadratic-samples", type=int, default=10_000,
                     help="samples for the quadratic-form verification")
    des.set_defaults(func=cmd_design)

    sw = sub.add_parser("sweep", help="steady-state scaling across kappa values")
    sw.add_argument("config", help="config JSON path or bundled plant name")
    sw.add_argument("--kappa", required=True, help="comma-separated kappa list")
    sw.add_argument("--out", default=None, help="output directory")
    sw.add_argument("--profile", choices=("full", "ci"), default=None)
    sw.add_argument("--t-final", type=float, default=10.0)
    sw.add_argument("--theta-star", type=float, default=None,
                    help="skip the design pass and use this threshold")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
