"""Command line interface: ``rgpl <subcommand>``.

Exit codes: 0 ok, 2 precondition violated, 3 numerical failure, 4 inconclusive.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex

EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERICAL, EXIT_INCONCLUSIVE = 0, 2, 3, 4


class Inconclusive(Exception):
    pass


def _load_config(args) -> ex.ExperimentConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ex.PreconditionError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise ex.PreconditionError("config must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    if args.out is not None:
        data["out"] = args.out
    return ex.ExperimentConfig.from_dict(data)


def _emit(cfg: ex.ExperimentConfig, name: str, result: dict) -> None:
    payload = {"schema_version": ex.SCHEMA_VERSION, "command": name, "config_hash": cfg.config_hash(),
               "seed": cfg.seed, "result": result}
    text = ex.report_json(payload)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_frd(cfg, args):
    from .frd import build_frd, build_symbol, frd_report, save_frd

    pot = ex.make_potential(cfg)
    fr = build_frd(build_symbol(pot.quadratic_form().matrix, None, cfg.torus(), pot.space))
    rep = frd_report(fr, scaling=args.scaling)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    save_frd(fr, Path(cfg.out) / "frd.npz")
    return rep


def cmd_polymers(cfg, args):
    from .polymers import GeometryParams, combinatorial_bounds, enumerate_polymers_jsonl

    geo = GeometryParams(cfg.d, cfg.L, cfg.N, 1)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    count = enumerate_polymers_jsonl(geo, args.k, args.max_blocks, Path(cfg.out) / "polymers.jsonl")
    rep = {"k": args.k, "max_blocks": args.max_blocks, "connected_polymers": count}
    if args.bounds:
        rep["combinatorics"] = combinatorial_bounds(geo, args.k, args.max_blocks)
    return rep


def cmd_weights(cfg, args):
    return ex.stage_weights(cfg)


def cmd_rg(cfg, args):
    return ex.stage_rg(cfg)


def cmd_null_lagrangian(cfg, args):
    from .elasticity import (det_null_lagrangian, hessian_det_on_skew, linear_null_lagrangian,
                             n0_null_lagrangian, null_test, periodic_null_test)
    from .torus import TorusGeometry

    d = cfg.d if cfg.d >= 2 else 2
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    torus = TorusGeometry(d, cfg.L, max(cfg.N, 2), d)
    out = {}
    for N in (det_null_lagrangian(d), n0_null_lagrangian(d), linear_null_lagrangian(d, (1,) + (0,) * (d - 1))):
        F = rng.standard_normal((d, d)) * 0.3
        out[N.kind] = {"brute_force": null_test(N, trials=args.trials, seed=cfg.seed),
                       "periodic": periodic_null_test(N, F, torus, seed=cfg.seed)}
    out["hessian_det_skew"] = hessian_det_on_skew(d, seed=cfg.seed)
    return out


def cmd_elasticity(cfg, args):
    from .elasticity import convexify, periodic_QN_sum, spring_potential
    from .torus import TorusGeometry

    U = spring_potential(2)
    conv = convexify(U, seed=cfg.seed)
    torus = TorusGeometry(2, cfg.L, max(cfg.N, 2), 2)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    sums = [periodic_QN_sum(conv, rng.standard_normal(torus.field_shape), torus) for _ in range(args.fields)]
    return {"alpha": conv.alpha, "mu": conv.mu, "margin": conv.margin, "omega1": conv.omega1,
            "certificate": conv.certificate, "periodic_QN_sums": sums}


def cmd_free_energy(cfg, args):
    return ex.free_energy(cfg)


def cmd_convexity(cfg, args):
    res = ex.convexity_scan(cfg)
    if res["verdict"] != "convex at resolution":
        res["_inconclusive"] = True
    return res


def cmd_scaling(cfg, args):
    return ex.scaling_limit(cfg, monte_carlo=not args.no_mc)


def cmd_pipeline(cfg, args):
    rep = ex.run_pipeline(cfg)
    ex.write_report(rep, cfg.out)
    return rep


COMMANDS = {
    "frd": (cmd_frd, "build and verify the finite range decomposition"),
    "polymers": (cmd_polymers, "enumerate connected polymers (JSONL)"),
    "weights": (cmd_weights, "build the weight family and verify its properties"),
    "rg": (cmd_rg, "fine-tune the initial relevant Hamiltonian and check the representation"),
    "null-lagrangian": (cmd_null_lagrangian, "null Lagrangian invariance tests"),
    "elasticity": (cmd_elasticity, "convexify the shipped spring potential"),
    "free-energy": (cmd_free_energy, "free energy W_{N,beta}(F) on the F grid"),
    "convexity": (cmd_convexity, "finite-difference Hessian scan of the free energy"),
    "scaling-limit": (cmd_scaling, "Laplace transform against the Gaussian prediction"),
    "pipeline": (cmd_pipeline, "run all stages and write the JSON and CSV report"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="u64 seed (overrides config)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="rgpl", parents=[common],
                                description="Renormalisation group experiments for gradient models.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "frd":
            sp.add_argument("--scaling", action="store_true", help="also fit the decay exponents")
        elif name == "polymers":
            sp.add_argument("--k", type=int, default=0)
            sp.add_argument("--max-blocks", type=int, default=3)
            sp.add_argument("--bounds", action="store_true", help="check the combinatorial bounds")
        elif name == "null-lagrangian":
            sp.add_argument("--trials", type=int, default=100)
        elif name == "elasticity":
            sp.add_argument("--fields", type=int, default=20)
        elif name == "scaling-limit":
            sp.add_argument("--no-mc", action="store_true", help="exact Fourier comparison only")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for k in ("config", "seed", "threads", "out"):
        if not hasattr(args, k):
            setattr(args, k, None)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = _load_config(args)
        res = fn(cfg, args)
    except (ex.PreconditionError, ValueError) as e:
        print(f"rgpl: precondition violated: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"rgpl: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    inconclusive = bool(res.pop("_inconclusive", False)) if isinstance(res, dict) else False
    _emit(cfg, args.command, res)
    if args.command == "pipeline":
        kinds = {s.get("kind") for s in res["stages"].values() if s.get("status") == "failed"}
        if "numerical" in kinds:
            return EXIT_NUMERICAL
        if "precondition" in kinds:
            return EXIT_PRECONDITION
        if res["stages"].get("convexity", {}).get("result", {}).get("verdict", "convex at resolution") \
                != "convex at resolution":
            return EXIT_INCONCLUSIVE
    return EXIT_INCONCLUSIVE if inconclusive else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
