"""Command line entry point.

Subcommands: run, verify-duality, generate, sweep-clusters,
sweep-redundancy. Flags override config-file values. Exit codes: 0 on
success, 1 for configuration errors, 2 for runtime or numeric errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import dualhead, duality, generate, harness, numerics, pdcl
from .harness import ConfigError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_common(sub):
    sub.add_argument("--config", help="path to a key=value config file")
    sub.add_argument("--out", help="output directory (overrides config)")
    sub.add_argument("--seed", help="comma separated seeds (overrides config)")
    sub.add_argument("--strategy", help="comma separated strategies (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ally", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the active learning experiment")
    _add_common(run)

    vd = sub.add_parser("verify-duality", help="numeric duality verification report")
    vd.add_argument("--instances", type=int, default=24)
    vd.add_argument("--seed", type=int, default=0)
    vd.add_argument("--out", default="out")

    gen = sub.add_parser("generate", help="gradient-ascent sample generation")
    _add_common(gen)
    gen.add_argument("--trajectories", type=int, default=16)
    gen.add_argument("--steps", type=int, default=200)
    gen.add_argument("--step-size", type=float, default=0.05)

    sc = sub.add_parser("sweep-clusters", help="cluster-count ablation")
    _add_common(sc)
    sc.add_argument("--k-values", default="",
                    help="comma separated cluster counts (1 and budget are added)")

    sr = sub.add_parser("sweep-redundancy", help="redundant-pool comparison")
    _add_common(sr)
    sr.add_argument("--factor", type=int, default=10)
    return parser


def _experiment_config(args) -> harness.ExperimentConfig:
    if args.config:
        config = harness.load_config(args.config)
    else:
        config = harness.build_config({})
    if args.out:
        config = replace(config, output_dir=args.out)
    if args.seed:
        config = replace(config, seeds=harness._as_int_list("--seed", args.seed))
    if args.strategy:
        config = replace(config,
                         strategies=harness._as_str_list("--strategy", args.strategy))
    return config


def _cmd_run(args) -> int:
    config = _experiment_config(args)
    result = harness.run_experiment(config)
    failed = [c for c in result.meta["cells"] if c["status"] != "ok"]
    print(f"wrote {len(result.points)} curve points to "
          f"{os.path.join(result.output_dir, 'curves.csv')}")
    for cell in failed:
        print(f"cell (strategy={cell['strategy']}, seed={cell['seed']}) "
              f"{cell['status']}", file=sys.stderr)
    return 2 if failed else 0


def _cmd_verify_duality(args) -> int:
    report = duality.verification_report(args.instances, args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "duality_report.json")
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
    from . import plots

    plots.render_duality_report(report, os.path.join(args.out, "duality_report.png"))
    worst_gap = max(i["duality_gap"] for i in report["instances"])
    print(f"{report['n_instances']} instances, worst duality gap {worst_gap:.3e}, "
          f"all checks passed: {report['all_checks_passed']}")
    print(f"wrote {path}")
    return 0 if report["all_checks_passed"] else 2


def _cmd_generate(args) -> int:
    config = _experiment_config(args)
    seed = config.seeds[0]
    pool = harness.build_pool(config, seed)
    arch = harness.build_arch(config, pool)
    params, dual, _ = pdcl.pdcl_train(pool.labeled_x, pool.labeled_y, arch,
                                      config.pdcl, harness.subseed(seed, 2, 0))
    emb_labeled, _, _ = numerics.forward(params, pool.labeled_x)
    head_cfg = replace(config.dual_head, rng_seed=harness.subseed(seed, 3, 0))
    head = dualhead.train_dual_head(emb_labeled, dual.lambdas, head_cfg)
    params = replace(params, dual_head=head)

    emb_unlabeled, _, _ = numerics.forward(params, pool.unlabeled_x)
    scores = dualhead.predict_duals(head, emb_unlabeled)
    decile = np.quantile(scores, 0.1)
    uninformative = np.flatnonzero(scores <= decile)
    order = uninformative[np.argsort(scores[uninformative])]
    starts = order[: args.trajectories]

    lo = float(pool.features.min())
    hi = float(pool.features.max())
    if hi <= lo:
        hi = lo + 1.0
    cfg = generate.AscentConfig(step_size=args.step_size, n_steps=args.steps,
                                clip_range=(lo, hi),
                                snapshot_every=max(1, args.steps // 4))
    trajectories = [
        generate.ascend_input(params, pool.unlabeled_x[i], cfg) for i in starts
    ]

    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    generate.save_score_csv(trajectories, os.path.join(out_dir, "ascent_scores.csv"))
    d = pool.dim
    side = int(round(np.sqrt(d)))
    shape = (side, side) if side * side == d else (1, d)
    n_snaps = min(len(t.xs) for t in trajectories)
    images = [t.xs[s] for s in range(n_snaps) for t in trajectories]
    generate.save_pgm_grid(images, shape, os.path.join(out_dir, "ascent_grid.pgm"),
                           cols=len(trajectories), value_range=(lo, hi))
    raised = sum(t.final_score >= 2.0 * max(t.initial_score, 1e-12)
                 for t in trajectories)
    print(f"{len(trajectories)} trajectories, {raised} at least doubled their "
          f"predicted dual; outputs in {out_dir}")
    return 0


def _cmd_sweep_clusters(args) -> int:
    config = _experiment_config(args)
    k_values = harness._as_int_list("--k-values", args.k_values) if args.k_values else ()
    result = harness.sweep_clusters(config, k_values)
    print(f"swept k over {result.meta['k_values']}; wrote "
          f"{os.path.join(result.output_dir, 'curves.csv')}")
    failed = [c for c in result.meta["cells"] if c["status"] != "ok"]
    return 2 if failed else 0


def _cmd_sweep_redundancy(args) -> int:
    config = _experiment_config(args)
    report = harness.sweep_redundancy(config, args.factor)
    print(f"redundancy factor {report['factor']}: gap shrank for "
          f"{report['n_seeds_gap_shrank']}/{len(report['gaps'])} seeds; "
          f"duplicate selections {report['duplicate_selections']}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "verify-duality": _cmd_verify_duality,
    "generate": _cmd_generate,
    "sweep-clusters": _cmd_sweep_clusters,
    "sweep-redundancy": _cmd_sweep_redundancy,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (numerics.NumericError, pdcl.PDCLDivergenceError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except duality.InfeasibleInstanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
