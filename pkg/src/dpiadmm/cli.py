"""Command-line front end.

Subcommands: ``run``, ``partition``, ``audit``, ``sensitivity-check`` and
``compose``. Run flags are the config keys verbatim (``--eps_bar 0.1``,
``--rho.c1 2``) and override values read from ``--config``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
abort, 4 inconclusive audit; a detected privacy violation or a failed
sensitivity check exits 5.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import admm, dataio, validation
from .federation import NumericalError, run_experiment
from .mechanisms import Mechanism, compose_epsilon
from .model import AgentData, ProblemDims, ShapeError, one_hot

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_INCONCLUSIVE = 4
EXIT_CHECK_FAILED = 5

SENSITIVITY_TOLERANCE = 1e-10

log = logging.getLogger("dpiadmm")


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not data errors (argparse defaults to 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _dest(key: str) -> str:
    return "cfg_" + key.replace(".", "_")


def _add_config_flags(p: argparse.ArgumentParser, keys=dataio.CONFIG_KEYS) -> None:
    p.add_argument("--config", help="flat key = value file or a run metadata JSON")
    for key in keys:
        p.add_argument(f"--{key}", dest=_dest(key), metavar="VALUE")


def _overrides(args) -> dict[str, str]:
    out = {}
    for key in dataio.CONFIG_KEYS:
        value = getattr(args, _dest(key), None)
        if value is not None:
            out[key] = value
    return out


def _load_config(args):
    return dataio.load_config(args.config, _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpiadmm", description="Differentially private inexact ADMM simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment and write metrics")
    _add_config_flags(run)
    run.add_argument("--out", default=".", help="output directory (default: current)")
    run.add_argument("--repeat", type=int, default=1, help="run seeds seed..seed+repeat-1")

    part = sub.add_parser("partition", help="split IDX training data into per-agent tables")
    _add_config_flags(part)
    part.add_argument("--out", required=True, help="directory for agent_XX.csv files")

    audit = sub.add_parser("audit", help="empirical privacy audit of one perturbed z-update")
    _add_config_flags(audit, ("algorithm", "eps_bar", "rho.c1", "rho.c2", "rho.Tc", "rho.cap",
                              "prox.a", "box.B", "beta", "seed", "num_classes"))
    audit.add_argument("--table", help="agent table for D (default: a random synthetic agent)")
    audit.add_argument("--rows", type=int, default=10, help="rows of the synthetic agent")
    audit.add_argument("--features", type=int, default=1, help="features of the synthetic agent")
    audit.add_argument("--classes", type=int, default=2, help="classes of the synthetic agent")
    audit.add_argument("--neighbor", default="worst",
                       help="row removed to form D': 'worst', 'same' (D' = D) or a row index")
    audit.add_argument("--noise_factor", type=float, default=1.0, help="multiplier on the calibrated scale")
    audit.add_argument("--t", type=int, default=1, help="iteration index fixing rho and the step size")
    audit.add_argument("--samples", type=int, default=1_000_000)
    audit.add_argument("--bins", type=int, default=60)
    audit.add_argument("--slack", type=float, default=0.1)
    audit.add_argument("--min_count", type=int, default=1000)
    audit.add_argument("--out", help="write the report as a one-row CSV")

    sens = sub.add_parser("sensitivity-check", help="closed-form vs brute-force sensitivity")
    sens.add_argument("--instances", type=int, default=100)
    sens.add_argument("--max_rows", type=int, default=20)
    sens.add_argument("--max_dim", type=int, default=5)
    sens.add_argument("--seed", type=int, default=0)

    comp = sub.add_parser("compose", help="total epsilon of T iterations")
    _add_config_flags(comp, ("algorithm", "T", "eps_bar", "delta_bar", "mechanism"))
    return parser


# ---------------------------------------------------------------- subcommands

def _composed(config) -> dict:
    mech = config.privacy.mechanism
    if mech is Mechanism.NONE:
        return {"composed_epsilon": None, "composed_delta": None}
    eps = compose_epsilon(config.privacy.eps_bar, config.T)
    delta = config.T * config.privacy.delta_bar if mech is Mechanism.GAUSSIAN_OUTPUT else 0.0
    return {"composed_epsilon": eps, "composed_delta": delta}


def cmd_run(args) -> int:
    config = _load_config(args)
    if args.repeat < 1:
        raise dataio.ConfigError("--repeat must be >= 1")
    agents, test = dataio.load_problem(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # seeds run one at a time so each metrics file is reproducible from its own metadata
    for seed in range(config.seed, config.seed + args.repeat):
        cfg = replace(config, seed=seed)
        result = run_experiment(cfg, agents, test)
        metrics_path = out / f"metrics_seed{seed}.csv"
        dataio.write_metrics(result.metrics, metrics_path)
        meta = {
            "config": dataio.config_to_mapping(cfg),
            "seed": seed,
            **_composed(cfg),
            "wall_time": result.wall_time,
            "metrics": metrics_path.name,
            "final_test_error": result.metrics[-1].test_error if result.metrics else None,
            "mean_noise_magnitude": result.mean_noise_magnitude,
        }
        (out / f"run_seed{seed}.json").write_text(json.dumps(meta, indent=2) + "\n")
        last = result.metrics[-1] if result.metrics else None
        print(f"seed {seed}: T={cfg.T} "
              + (f"test_error={last.test_error:.4f} cv={last.consensus_violation:.3g} " if last else "")
              + f"wall={result.wall_time:.1f}s -> {metrics_path}")
    return EXIT_OK


def cmd_partition(args) -> int:
    config = _load_config(args)
    if config.agents_dir:
        raise dataio.ConfigError("partition reads train.images / train.labels, not agents.dir")
    agents, _ = dataio.load_problem(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(len(agents) - 1)))
    for p, agent in enumerate(agents):
        dataio.write_agent_table(agent, out / f"agent_{p:0{width}d}.csv")
    print(f"wrote {len(agents)} agent tables to {out}")
    return EXIT_OK


def _audit_data(args, config, rng) -> AgentData:
    if args.table:
        if config.num_classes is None:
            raise dataio.ConfigError("num_classes: required with --table")
        data = dataio.load_agent_table(args.table, config.num_classes)
        if config.bias_column:
            data = AgentData(dataio.add_bias_column(data.features), data.labels)
        return data
    if min(args.rows, args.features, args.classes) < 1:
        raise dataio.ConfigError("--rows, --features and --classes must be >= 1")
    x = rng.normal(size=(args.rows, args.features))
    c = rng.integers(0, args.classes, size=args.rows)
    return AgentData(x, one_hot(c, args.classes))


def cmd_audit(args) -> int:
    config = _load_config(args)
    if config.privacy.mechanism is not Mechanism.LAPLACE_OBJECTIVE:
        raise dataio.ConfigError("audit covers the Laplace objective-perturbation update (ObjP or ObjT)")
    if args.samples < 1 or args.bins < 1 or args.t < 1:
        raise dataio.ConfigError("--samples, --bins and --t must be >= 1")
    rng = np.random.default_rng(config.seed)
    data = _audit_data(args, config, rng)
    if data.num_samples == 0:
        raise dataio.ParseError("audit needs a non-empty dataset")
    J, K = data.num_features, data.num_classes
    dims = ProblemDims(P=1, J=J, K=K, I=data.num_samples, beta=config.beta)
    # frozen inputs sit close together so the trust region does not pin every output to its edge
    z_t = config.box.project(rng.normal(size=(J, K)))
    w_next = config.box.project(z_t + 0.1 * rng.normal(size=(J, K)))
    lambda_t = 0.1 * rng.normal(size=(J, K))

    if args.neighbor == "same":
        data_prime = data
    elif args.neighbor == "worst":
        _, data_prime = validation.worst_case_neighbor(z_t, data, dims)
    else:
        try:
            i = int(args.neighbor)
        except ValueError:
            raise dataio.ConfigError(f"--neighbor: expected worst, same or a row index, got {args.neighbor!r}") from None
        if not 0 <= i < data.num_samples:
            raise dataio.ConfigError(f"--neighbor: row {i} outside [0, {data.num_samples})")
        data_prime = data.without_row(i)

    mechanism = validation.ZUpdateMechanism(
        z_t=z_t, w_next=w_next, lambda_t=lambda_t, dims=dims, eps_bar=config.privacy.eps_bar,
        rho=admm.rho_schedule(args.t, config.privacy.eps_bar, config.schedules), calibrate_on=data,
        t=args.t, prox_scale=config.schedules.prox_scale, trust=config.algorithm.uses_trust_region,
        noise_factor=args.noise_factor, box=config.box,
    )
    report = validation.empirical_dp_audit(mechanism, data, data_prime, config.privacy.eps_bar,
                                           samples=args.samples, bins=args.bins, slack=args.slack,
                                           min_count=args.min_count, seed=config.seed)
    print(report.summary())
    if args.out:
        validation.write_audit_report(report, args.out)
    if report.inconclusive:
        return EXIT_INCONCLUSIVE
    return EXIT_CHECK_FAILED if report.violation else EXIT_OK


def cmd_sensitivity_check(args) -> int:
    if min(args.instances, args.max_rows, args.max_dim) < 1:
        raise dataio.ConfigError("--instances, --max_rows and --max_dim must be >= 1")
    worst = validation.sensitivity_corpus_check(args.instances, args.max_rows, args.max_dim, args.seed)
    ok = worst <= SENSITIVITY_TOLERANCE
    print(f"max relative error {worst:.3e} over {args.instances} instances "
          f"(tolerance {SENSITIVITY_TOLERANCE:g}) -> {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_compose(args) -> int:
    config = _load_config(args)
    info = _composed(config)
    if info["composed_epsilon"] is None:
        print(f"{config.algorithm.value} adds no noise: no privacy guarantee")
    else:
        line = f"eps_total={info['composed_epsilon']:g} (T={config.T} x eps_bar={config.privacy.eps_bar:g})"
        if config.privacy.mechanism is Mechanism.GAUSSIAN_OUTPUT:
            line += f" delta_total={info['composed_delta']:g}"
        print(line)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "partition": cmd_partition,
    "audit": cmd_audit,
    "sensitivity-check": cmd_sensitivity_check,
    "compose": cmd_compose,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except dataio.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.ParseError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # remaining validation failures come from building config objects
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
