"""Command-line entry point: account, calibrate, simulate, table1, oracle.

Flags mirror config keys one to one and override them; the FEDJOINT_SEED
environment variable overrides a config-file seed (explicit --seed wins).
Exit code is 0 iff the command completed without error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import oracles
from .accounting import MechanismSpec, NoiseFamily, PrivacyBudget, SubsamplingSpec, write_report
from .joint import (
    AccountingPlan,
    HeterogeneityDescriptor,
    calibrate_joint_noise,
    joint_report,
    steps_for_epochs,
)
from .fedsim import load_config, run_experiment
from .table1 import render_table, reproduce_table

__all__ = ["main", "build_parser"]


def _add_plan_flags(p: argparse.ArgumentParser, with_sigma: bool) -> None:
    p.add_argument("--mechanism", choices=["gaussian", "skellam"], default="skellam")
    if with_sigma:
        p.add_argument("--sigma", type=float, required=True,
                       help="per-client noise multiplier (units of the clip norm)")
    p.add_argument("--clip", type=float, default=1.0, help="clipping norm C")
    p.add_argument("--clients", type=int, default=1, help="number of clients N")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--steps", type=int, help="local steps per round S")
    group.add_argument("--epochs", type=int,
                       help="local epochs per round (steps = epochs * round(1/q))")
    p.add_argument("--rounds", type=int, default=1, help="federated rounds T")
    p.add_argument("--q", type=float, default=0.1, help="Poisson sampling rate")
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--scale", type=int, default=2**16,
                   help="fixed-point scale (Skellam)")
    p.add_argument("--dim", type=int, default=1, help="model dimension")
    p.add_argument("--het-file", type=str, default=None,
                   help="JSON heterogeneity descriptor")
    p.add_argument("--colluders", type=int, default=0,
                   help="honest-but-curious clients to tolerate")
    p.add_argument("--out", type=str, default=None, help="write JSON report here")


def _heterogeneity(path: str | None) -> HeterogeneityDescriptor | None:
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    fusion = raw.get("fusion")
    return HeterogeneityDescriptor(
        per_step_lr=raw.get("per_step_lr"),
        client_lr_divisors=raw.get("client_lr_divisors"),
        per_client_clip=raw.get("per_client_clip"),
        per_client_sigma=raw.get("per_client_sigma"),
        fusion=tuple((int(s), int(f)) for s, f in fusion) if fusion else None)


def _plan_from_args(args, sigma: float) -> AccountingPlan:
    steps = args.steps
    if args.epochs is not None:
        steps = steps_for_epochs(args.epochs, args.q)
    elif steps is None:
        steps = 1
    mech = MechanismSpec(family=NoiseFamily(args.mechanism), noise_multiplier=sigma,
                         clip_norm=args.clip, fixedpoint_scale=args.scale,
                         dimension=args.dim)
    return AccountingPlan(n_clients=args.clients, local_steps=steps,
                          rounds=args.rounds, subsampling=SubsamplingSpec(args.q),
                          mechanism=mech, heterogeneity=_heterogeneity(args.het_file))


def _cmd_account(args) -> int:
    plan = _plan_from_args(args, args.sigma)
    report = joint_report(plan, args.delta, colluders_tolerated=args.colluders)
    print(f"epsilon = {report['epsilon']:.6g} at delta = {report['delta']:.3g}")
    print(f"sigma_per_client = {report['sigma_per_client']:.6g}, "
          f"sigma_total = {report['sigma_total']:.6g}")
    print(f"minimizing order = {report['minimizing_order']}")
    if args.colluders:
        hbc = report["trust_model"]["sigma_per_client_hbc"]
        print(f"sigma_per_client to tolerate {args.colluders} colluders = {hbc:.6g}")
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    plan = _plan_from_args(args, 1.0)
    target = PrivacyBudget(epsilon=args.target_eps, delta=args.delta)
    sigma = calibrate_joint_noise(plan, target)
    sigma_total = sigma * math.sqrt(args.clients)
    print(f"sigma_per_client = {sigma:.6g}")
    print(f"sigma_total = {sigma_total:.6g}")
    if args.out:
        plan = _plan_from_args(args, sigma)
        report = joint_report(plan, args.delta)
        report["target_epsilon"] = args.target_eps
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    overrides = {}
    env_seed = os.environ.get("FEDJOINT_SEED")
    if env_seed is not None:
        overrides["seed"] = int(env_seed)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if args.steps is not None:
        overrides["local_steps"] = args.steps
    cfg = load_config(args.config, overrides)
    metrics, report, _ = run_experiment(cfg, output_dir=args.out_dir)
    if metrics:
        last = metrics[-1]
        print(f"rounds = {len(metrics)}, final accuracy = {last.accuracy:.4f}, "
              f"final loss = {last.loss:.4f}, epsilon spent = {last.eps_spent:.4f}")
    else:
        print("rounds = 0, epsilon spent = 0")
    print(f"outputs in {args.out_dir}")
    return 0


def _cmd_table1(args) -> int:
    rows = reproduce_table(target_epsilon=args.target_eps, delta=args.delta,
                           rate=args.q)
    if args.json:
        payload = [{
            "local_steps": r.label, "steps": r.steps, "parties": r.parties,
            "sigma_ldp": r.sigma_ldp, "sigma_total": r.sigma_total,
            "epsilon": r.epsilon, "ref_sigma_total": r.ref_sigma_total,
            "ref_epsilon": r.ref_epsilon,
            "sigma_total_deviation": r.sigma_total_deviation,
            "epsilon_deviation": r.epsilon_deviation,
        } for r in rows]
        print(json.dumps(payload, indent=2))
    else:
        print(render_table(rows))
    return 0


def _cmd_oracle(args) -> int:
    if args.kind == "renyi-gaussian":
        val = oracles.renyi_gaussian_numeric(args.shift, args.std, args.order)
    elif args.kind == "renyi-skellam":
        val = oracles.renyi_skellam_numeric(int(args.shift), args.mu, int(args.order))
    elif args.kind == "renyi-subsampled-gaussian":
        val = oracles.renyi_subsampled_gaussian_numeric(args.shift, args.std,
                                                        args.rate, args.order)
    else:  # hockey-stick-gaussian
        p = oracles.gaussian_dist(args.shift, args.std)
        q = oracles.gaussian_dist(0.0, args.std)
        val = oracles.hockey_stick_numeric(p, q, math.exp(args.epsilon))
    print(f"{val!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedjoint",
        description="Privacy accounting, calibration, and simulation for "
                    "federated DP-SGD with joint noise scaling")
    sub = parser.add_subparsers(dest="command", required=True)

    p_account = sub.add_parser("account", help="account a training plan")
    _add_plan_flags(p_account, with_sigma=True)
    p_account.set_defaults(func=_cmd_account)

    p_cal = sub.add_parser("calibrate", help="calibrate per-client noise to a target")
    p_cal.add_argument("--target-eps", type=float, required=True)
    _add_plan_flags(p_cal, with_sigma=False)
    p_cal.set_defaults(func=_cmd_calibrate)

    p_sim = sub.add_parser("simulate", help="run a federated training simulation")
    p_sim.add_argument("--config", required=True, help="TOML experiment file")
    p_sim.add_argument("--out-dir", default="fedjoint_out",
                       help="directory for metrics.csv and report.json")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--rounds", type=int, default=None)
    p_sim.add_argument("--steps", type=int, default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_tab = sub.add_parser("table1", help="reproduce the averaged-model privacy table")
    p_tab.add_argument("--target-eps", type=float, default=5.0)
    p_tab.add_argument("--delta", type=float, default=1e-5)
    p_tab.add_argument("--q", type=float, default=0.1)
    p_tab.add_argument("--json", action="store_true")
    p_tab.set_defaults(func=_cmd_table1)

    p_orc = sub.add_parser("oracle", help="numeric reference spot checks")
    p_orc.add_argument("kind", choices=["renyi-gaussian", "renyi-skellam",
                                        "renyi-subsampled-gaussian",
                                        "hockey-stick-gaussian"])
    p_orc.add_argument("--shift", type=float, default=1.0)
    p_orc.add_argument("--std", type=float, default=1.0)
    p_orc.add_argument("--mu", type=float, default=10.0)
    p_orc.add_argument("--rate", type=float, default=0.1)
    p_orc.add_argument("--order", type=int, default=2)
    p_orc.add_argument("--epsilon", type=float, default=1.0)
    p_orc.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
