"""Command line entry point: ``cmidrl <command> [options]``.

Every command accepts ``--config FILE`` and any number of ``--set key=value``
overrides.  Exit status is 0 on success, 1 for configuration or usage
errors and 2 when a run aborts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import envs, evaluation, runner
from .config import load_config
from .errors import ConfigurationError, NonFiniteError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _common(p):
    p.add_argument("--config", help="run-config file (key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set cmid.enabled=true")
    p.add_argument("--out", help="output directory (defaults to io.out_dir)")


def _with_checkpoint(p):
    p.add_argument("--checkpoint",
                   help="agent checkpoint (defaults to <out>/checkpoints/final.ckpt)")


def build_parser():
    parser = argparse.ArgumentParser(prog="cmidrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent and write a run directory")
    _common(p)
    p.add_argument("--seed", type=int, help="master seed (defaults to the first protocol seed)")

    p = sub.add_parser("sweep", help="one run per value of a config axis and seed")
    _common(p)
    p.add_argument("--axis", choices=sorted(runner.SWEEP_KEYS))
    p.add_argument("--values", help="comma separated values")

    p = sub.add_parser("evaluate", help="deterministic return on each variant/colour cell")
    _common(p)
    _with_checkpoint(p)

    p = sub.add_parser("shift-eval", help="zero-shot evaluation under a correlation shift")
    _common(p)
    _with_checkpoint(p)
    p.add_argument("--scenario", choices=("reversed", "uncorrelated", "train"))

    p = sub.add_parser("colours", help="mean return over an RGB colour grid")
    _common(p)
    _with_checkpoint(p)
    p.add_argument("--grid", type=int, default=6, help="levels per channel (default 6)")

    p = sub.add_parser("attribute", help="integrated-gradients maps, one per latent feature")
    _common(p)
    _with_checkpoint(p)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--variant", choices=envs.VARIANTS, default="A")
    p.add_argument("--colour", choices=sorted(envs.COLOURS), default="blue")
    p.add_argument("--position", type=float, default=0.3)

    p = sub.add_parser("estimate-cmi", help="classifier estimate of I(X; Y | Z)")
    _common(p)
    p.add_argument("--data", help="CSV whose columns start with x, y or z; "
                                  "omit to use the bundled Gaussian fixture")
    p.add_argument("--partial-corr", type=float, default=0.8,
                   help="partial correlation of the Gaussian fixture")
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _out_dir(args, config):
    out = args.out or config.io.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _load(args, config, out):
    path = args.checkpoint or os.path.join(out, "checkpoints", "final.ckpt")
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path} (train first or pass --checkpoint)")
    agent, _ = runner.load_agent(config, path)
    return agent


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def cmd_train(args, config):
    out = _out_dir(args, config)
    res = runner.run_train(config, args.seed, out,
                           progress=lambda s, ph, r: print(f"step {s:>7d}  {ph:<12s} {r:9.3f}"))
    missing = runner.missing_artifacts(out)
    if res.aborted:
        print(f"run aborted: {res.message}", file=sys.stderr)
        return EXIT_ABORT
    if missing:
        print(f"run directory incomplete, missing: {', '.join(missing)}", file=sys.stderr)
        return EXIT_ABORT
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args, config):
    out = _out_dir(args, config)
    values = args.values.split(",") if args.values else None
    rows = runner.run_sweep(config, args.axis, values, out)
    print(f"{len(rows)} runs, summary in {os.path.join(out, 'sweep_summary.csv')}")
    return EXIT_ABORT if any(r["aborted"] for r in rows) else EXIT_OK


def cmd_evaluate(args, config):
    out = _out_dir(args, config)
    agent = _load(args, config, out)
    cells = runner.evaluate_cells(agent, config)
    spec = envs.CorrelationSpec(config.env.rho, "train", config.env.greyscale)
    with open(os.path.join(out, "evaluate.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "colour", "return"])
        for (v, c), r in cells.items():
            w.writerow([v, c, repr(r)])
    summary = {f"{v}/{c}": r for (v, c), r in cells.items()}
    summary["expected_return"] = runner.expected_return(cells, spec)
    _write_json(os.path.join(out, "evaluate.json"), summary)
    if config.io.figures:
        from . import plotting

        plotting.cell_returns(os.path.join(out, "evaluate.png"), summary_cells(cells))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def summary_cells(cells):
    return {f"{v}/{c}": r for (v, c), r in cells.items()}


def cmd_shift_eval(args, config):
    out = _out_dir(args, config)
    agent = _load(args, config, out)
    scenario = args.scenario or (config.protocol.shift if config.protocol.shift != "none"
                                 else "reversed")
    spec = envs.CorrelationSpec(config.env.rho, "train", config.env.greyscale)
    report = evaluation.shift_eval(evaluation.AgentPolicy(agent), spec, scenario,
                                   config.protocol.eval_episodes, config.protocol.eval_seeds,
                                   config.env.mode, config.env.horizon)
    evaluation.write_shift_report(report, out, "shift")
    if config.io.figures:
        from . import plotting

        plotting.cell_returns(os.path.join(out, "shift_cells.png"),
                              summary_cells(report.cell_returns), f"{scenario} correlation")
    mean, se = report.phase_mean[scenario], report.phase_se[scenario]
    print(f"{scenario}: {mean:.3f} +/- {se:.3f} over {len(report.records)} episodes")
    return EXIT_OK


def cmd_colours(args, config):
    if args.grid < 1:
        raise ConfigurationError("--grid must be >= 1")
    out = _out_dir(args, config)
    agent = _load(args, config, out)
    report = evaluation.colour_robustness(evaluation.AgentPolicy(agent), args.grid,
                                          mode=config.env.mode, horizon=config.env.horizon,
                                          greyscale=config.env.greyscale)
    evaluation.write_colour_csv(os.path.join(out, "colours.csv"), report)
    _write_json(os.path.join(out, "colours.json"),
                {"worst": report.worst, "best": report.best, "average": report.average,
                 "n_colours": len(report.colours)})
    if config.io.figures:
        from . import plotting

        plotting.colour_histogram(os.path.join(out, "colours.png"), report)
    print(f"{len(report.colours)} colours: worst {report.worst:.3f}  "
          f"average {report.average:.3f}  best {report.best:.3f}")
    return EXIT_OK


def cmd_attribute(args, config):
    out = _out_dir(args, config)
    agent = _load(args, config, out)
    state = envs.FactorState(args.variant, envs.COLOURS[args.colour], position=args.position)
    x = envs.render(state, config.env.mode, config.env.greyscale)
    att_dir = os.path.join(out, "attributions")
    os.makedirs(att_dir, exist_ok=True)
    maps = []
    for feature in range(agent.encoder.out_dim):
        amap = evaluation.integrated_gradients(agent.encoder, feature, x, steps=args.steps)
        evaluation.write_attribution(os.path.join(att_dir, f"feature_{feature:02d}"), amap,
                                     config.env.mode)
        maps.append(amap)
    _write_json(os.path.join(att_dir, "residuals.json"),
                {f"feature_{m.feature:02d}": m.residual for m in maps})
    if config.io.figures:
        from . import plotting

        plotting.attribution_grid(os.path.join(att_dir, "attributions.png"), maps)
    worst = max(m.residual for m in maps)
    print(f"{len(maps)} attribution maps in {att_dir} (max completeness residual {worst:.2e})")
    return EXIT_OK


def read_xyz_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ConfigurationError(f"{path}: no data rows")
    header, data = rows[0], np.array(rows[1:], dtype=float)
    cols = {k: [i for i, h in enumerate(header) if h.strip().lower().startswith(k)]
            for k in "xyz"}
    if not cols["x"] or not cols["y"]:
        raise ConfigurationError(f"{path}: need columns starting with x and y")
    return tuple(data[:, cols[k]] for k in "xyz")


def cmd_estimate_cmi(args, config):
    out = _out_dir(args, config)
    rng = np.random.default_rng(args.seed)
    if args.data:
        x, y, z = read_xyz_csv(args.data)
        oracle = None
    else:
        if not -1.0 < args.partial_corr < 1.0:
            raise ConfigurationError("--partial-corr must lie in (-1, 1)")
        x, y, z = evaluation.gaussian_partial_correlation_samples(args.samples,
                                                                  args.partial_corr, rng)
        oracle = evaluation.gaussian_cmi(args.partial_corr)
    est = evaluation.estimate_cmi(x, y, z, k=args.k, rng=rng)
    result = {"estimate": est.estimate, "accuracy": est.accuracy, "n_samples": est.n_samples,
              "k": est.k, "degenerate": est.degenerate, "analytic": oracle,
              "source": args.data or f"gaussian(partial_corr={args.partial_corr})"}
    _write_json(os.path.join(out, "cmi.json"), result)
    line = f"I(X;Y|Z) ~ {est.estimate:.4f} nats"
    if oracle is not None:
        line += f" (analytic {oracle:.4f})"
    print(line)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "shift-eval": cmd_shift_eval,
    "colours": cmd_colours,
    "attribute": cmd_attribute,
    "estimate-cmi": cmd_estimate_cmi,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        return COMMANDS[args.command](args, config)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
