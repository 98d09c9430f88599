"""Command-line entry point.

Subcommands: train, eval, theory, baseline.  Exit codes: 0 success,
1 usage/config error, 2 runtime failure, 3 theory-suite failure.
Seed and output directory can be overridden with STACKELMAC_SEED and
STACKELMAC_OUT.
"""

import argparse
import json
import os
import sys
import time
import traceback

import numpy as np

from . import metrics, ppo, runio, theory
from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, ContractError, SizeError,
                     TrainingDiverged)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_THEORY = 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stackelmac",
        description="Uplink-scheduling game: training, evaluation, theory suites")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, desc in (("train", "PPO-train the token policies"),
                       ("eval", "evaluate policies over a scenario grid"),
                       ("theory", "run the numerical theory suite"),
                       ("baseline", "train/evaluate a baseline policy")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", help="YAML run configuration",
                       required=(name != "theory"))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--deterministic", action="store_true",
                       help="force single-worker, fixed-order execution")
        if name == "eval":
            p.add_argument("--checkpoint", default=None,
                           help="directory holding leader/follower checkpoints "
                                "(needed by token/dictator policies)")
        if name == "baseline":
            p.add_argument("--baseline", default="heuristic",
                           choices=["heuristic", "mappo-s"])
    return parser


def _resolve(args):
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get("STACKELMAC_SEED", "0"))
    out = args.out or os.environ.get("STACKELMAC_OUT") or "."
    os.makedirs(out, exist_ok=True)
    workers = 1 if args.deterministic else max(1, args.workers)
    return seed, out, workers


def _load(args):
    if args.config:
        return load_config(args.config)
    return RunConfig()


def cmd_train(args):
    config = _load(args)
    seed, out, workers = _resolve(args)
    started = time.time()
    from .policy import save_checkpoint
    log_path = os.path.join(out, "training_log.jsonl")
    header = {"schema": ppo.TRAINLOG_SCHEMA, "config_hash": config.hash(),
              "seed": seed, "run_id": runio.run_id("train", config.hash(), seed)}
    writer = runio.JsonlWriter(log_path, header)
    outputs = [log_path]

    def ckpt_hook(leader, follower, epoch):
        for role, pol in (("leader", leader), ("follower", follower)):
            path = os.path.join(out, f"{role}_epoch{epoch + 1}.npz")
            save_checkpoint(path, pol, config_hash=config.hash(), epoch=epoch + 1)
            outputs.append(path)

    try:
        leader, follower, _ = ppo.train(config, seed, log_hook=writer.write,
                                        checkpoint_hook=ckpt_hook)
    except TrainingDiverged as exc:
        writer.close()
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    writer.close()
    for role, pol in (("leader", leader), ("follower", follower)):
        path = os.path.join(out, f"{role}_final.npz")
        save_checkpoint(path, pol, config_hash=config.hash(),
                        epoch=config.train.max_epochs)
        outputs.append(path)
    runio.write_manifest(out, "train", config, seed, outputs, started,
                         workers=workers, deterministic=args.deterministic)
    print(f"training complete; log at {log_path}")
    return EXIT_OK


def _build_policies(config, args, seed):
    """Instantiate the drivers named in the eval config's policy list."""
    from .baselines import MappoRunner, build_mappo
    from .policy import load_checkpoint
    specs = getattr(config.eval, "policies", ()) or ({"type": "token"},)
    if isinstance(specs, dict):
        specs = (specs,)
    drivers = {}
    for spec in specs:
        if not isinstance(spec, dict):
            spec = dict(spec)
        ptype = spec.get("type", "token")
        name = spec.get("name", ptype)
        if ptype in ("token", "dictator", "random"):
            if ptype == "random":
                from .policy import TokenPolicy
                ss = np.random.SeedSequence(seed).spawn(2)
                leader = TokenPolicy("leader", config.policy, config.env,
                                     rng=np.random.default_rng(ss[0]))
                follower = TokenPolicy("follower", config.policy, config.env,
                                       rng=np.random.default_rng(ss[1]))
            else:
                ckpt_dir = spec.get("checkpoint") or args.checkpoint
                if not ckpt_dir:
                    raise ConfigError(f"policy {name!r} needs a checkpoint "
                                      "directory (--checkpoint or config key)")
                leader, lmeta = load_checkpoint(os.path.join(ckpt_dir,
                                                             "leader_final.npz"))
                follower, fmeta = load_checkpoint(os.path.join(ckpt_dir,
                                                               "follower_final.npz"))
                for meta, path in ((lmeta, "leader_final.npz"),
                                   (fmeta, "follower_final.npz")):
                    metrics.verify_checkpoint_compat(meta, config.policy,
                                                     config.env, path)
            decode = config.eval.decode
            cls = metrics.DictatorDriver if ptype == "dictator" else metrics.TokenDriver
            drivers[name] = cls(leader, follower, decode=decode,
                                temperature=config.eval.sample_temperature)
        elif ptype == "heuristic":
            drivers[name] = metrics.AlohaDriver()
        elif ptype == "mappo":
            i_train = int(spec.get("i_train", min(config.env.num_ues_range)))
            adapter = bool(spec.get("adapter", False))
            lnet, fnet = build_mappo(config.env, i_train,
                                     rng=np.random.default_rng(seed),
                                     mode=spec.get("mode", "G"), adapter=adapter)
            runner = MappoRunner(config.env, lnet, fnet, i_train)
            drivers[name] = metrics.MappoDriver(runner)
        else:
            raise ConfigError(f"unknown policy type {ptype!r}")
    return drivers


def _scenarios(config):
    raw = config.eval.scenarios
    if not raw:
        return [{"i": i, "label": f"i{i}"} for i in config.env.num_ues_range]
    out = []
    for sc in raw:
        out.append(dict(sc) if isinstance(sc, dict) else dict(sc))
    return out


def cmd_eval(args):
    config = _load(args)
    seed, out, workers = _resolve(args)
    started = time.time()
    drivers = _build_policies(config, args, seed)
    scenarios = _scenarios(config)
    rows = metrics.evaluate(drivers, scenarios, config.env, config.game,
                            config.eval, seed)
    for row in rows:
        row["run_id"] = runio.run_id("eval", config.hash(), seed)
    csv_path = os.path.join(out, "kpis.csv")
    metrics.write_csv(csv_path, rows)
    plot_path = os.path.join(out, "plot_data.json")
    sweep_key = "tbler" if len({r["tbler"] for r in rows}) > 1 else "i"
    metrics.write_plot_data(plot_path, rows, sweep_key)
    runio.write_manifest(out, "eval", config, seed, [csv_path, plot_path],
                         started, workers=workers,
                         deterministic=args.deterministic)
    print(f"evaluation complete; {len(rows)} rows at {csv_path}")
    return EXIT_OK


def cmd_theory(args):
    config = _load(args)
    seed, out, workers = _resolve(args)
    started = time.time()
    report = run_theory_suite(config, seed)
    path = os.path.join(out, "theory_report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    runio.write_manifest(out, "theory", config, seed, [path], started,
                         workers=workers, deterministic=args.deterministic)
    print(_theory_table(report))
    return EXIT_OK if report["all_pass"] else EXIT_THEORY


def run_theory_suite(config, seed):
    """Assemble the full TheoryReport (also used by tests)."""
    tc = config.theory
    weights = config.game
    rng = np.random.default_rng(seed)
    report = {"schema": "stackelmac.theory/1", "config_hash": config.hash(),
              "run_id": runio.run_id("theory", config.hash(), seed)}

    worst = 0.0
    instances = 0
    for i in range(1, tc.potential_max_ues + 1):
        for m in range(1, tc.potential_max_rbgs + 1):
            worst = max(worst, theory.verify_exact_potential(
                i, m, draws=tc.potential_draws, rng=rng))
            instances += tc.potential_draws
    report["potential"] = {"max_violation": worst, "instances": instances,
                           "pass": worst <= 1e-12}

    from . import game as gm
    nonempty = 0
    for _ in range(tc.ne_instances):
        i = int(rng.integers(2, 4))
        m = int(rng.integers(1, 4))
        caps = rng.integers(1, 5, size=m).astype(float)
        dcm = tuple(int(t) for t in rng.integers(0, i + 1, size=m))
        bits = tuple(gm.dcm_bits_for_ue(dcm, u + 1, i) for u in range(i))
        stage = gm.StageGame(i, caps, bits)
        if theory.enumerate_follower_ne(stage, weights):
            nonempty += 1
    report["ne_existence"] = {"instances": tc.ne_instances,
                              "nonempty": nonempty,
                              "pass": nonempty == tc.ne_instances}

    converged = 0
    rate_ok = 0
    for _ in range(tc.contraction_games):
        g = theory.random_contraction_game(rng)
        rep = theory.contraction_analysis(g.jacobian_exact(1.0),
                                          tol=tc.neg_definite_tol)
        field = theory.build_gradient_field(g, 1.0)
        theta0 = g.theta_star + 0.5 * rng.normal(size=g.theta_star.shape)
        sim = theory.simulate_updates(field, theta0, rep.alpha_b, 500,
                                      g.theta_star)
        converged += int(sim.converged)
        rate_ok += int(sim.empirical_rate <= rep.rate_bound + 0.05)
    ident = theory.contraction_analysis(-np.eye(4))
    two = theory.contraction_analysis(-2.0 * np.eye(4))
    analytic_ok = (abs(ident.kappa1 - 1) < 1e-12 and abs(ident.kappa2 - 1) < 1e-12
                   and ident.rate_bound < 1e-9
                   and abs(two.kappa1 - 2) < 1e-12 and abs(two.kappa2 - 4) < 1e-12
                   and two.rate_bound < 1e-9)
    report["contraction"] = {
        "games": tc.contraction_games, "converged": converged,
        "rate_within_bound": rate_ok, "analytic_cases_ok": analytic_ok,
        "pass": (converged == tc.contraction_games
                 and rate_ok == tc.contraction_games and analytic_ok)}

    agree = 0
    for _ in range(tc.schur_triples):
        a = -theory._random_spd(rng, 3, (0.5, 2.0))
        d = -theory._random_spd(rng, 2, (0.5, 2.0))
        b = rng.normal(scale=0.4, size=(3, 2))
        res = theory.schur_timescale(a, b, d, tol=tc.neg_definite_tol)
        agree += int(res["certified"])
    report["schur"] = {"triples": tc.schur_triples, "certified": agree,
                       "pass": agree == tc.schur_triples}

    fam = theory.random_shared_policy_family(rng, support=tc.averaged_support)
    avg = theory.averaged_dynamics_check(fam, seeds=tc.averaged_seeds, rng=rng,
                                         tol=tc.neg_definite_tol)
    report["averaged"] = {
        "support": list(tc.averaged_support),
        "per_realization_certified": avg["per_realization_certified"],
        "averaged_certified": avg["averaged_certified"],
        "all_converged": avg["all_converged"],
        "final_distances": avg["final_distances"],
        "pass": (avg["per_realization_certified"] and avg["averaged_certified"]
                 and avg["all_converged"])}

    controls = []
    if tc.include_negative_controls:
        viol = theory.verify_exact_potential(2, 2, perturb_scale=0.1, rng=rng)
        controls.append({"name": "perturbed_interactive_utility",
                         "expected": "violation > 0",
                         "observed_violation": viol, "ok": viol > 1e-6})
        saddle = theory.constructed_dse_game(rng, saddle=True)
        rep = theory.check_dse(saddle.theta_star, saddle)
        controls.append({"name": "saddle_second_order",
                         "expected": "second_order check fails",
                         "observed": rep["second_order_ok"],
                         "ok": not rep["second_order_ok"]})
    report["negative_controls"] = controls

    suites = ["potential", "ne_existence", "contraction", "schur", "averaged"]
    report["all_pass"] = (all(report[s]["pass"] for s in suites)
                          and all(c["ok"] for c in controls))
    return report


def _theory_table(report):
    lines = ["theory suite summary:"]
    for name in ("potential", "ne_existence", "contraction", "schur", "averaged"):
        status = "PASS" if report[name]["pass"] else "FAIL"
        lines.append(f"  {name:<14} {status}")
    for control in report.get("negative_controls", []):
        status = "OK (expected fail observed)" if control["ok"] else "UNEXPECTED"
        lines.append(f"  control:{control['name']:<30} {status}")
    lines.append(f"  overall        {'PASS' if report['all_pass'] else 'FAIL'}")
    return "\n".join(lines)


def cmd_baseline(args):
    config = _load(args)
    seed, out, workers = _resolve(args)
    started = time.time()
    scenarios = _scenarios(config)
    outputs = []
    if args.baseline == "heuristic":
        drivers = {"heuristic": metrics.AlohaDriver()}
        rows = metrics.evaluate(drivers, scenarios, config.env, config.game,
                                config.eval, seed)
    else:   # mappo-s: retrain per scenario size, then evaluate there
        from .baselines import MappoRunner, train_mappo
        rows = []
        for s_idx, sc in enumerate(scenarios):
            i_train = int(sc["i"])
            lnet, fnet, _ = train_mappo(config, i_train, seed + s_idx)
            runner = MappoRunner(config.env, lnet, fnet, i_train)
            drivers = {f"mappo-s": metrics.MappoDriver(runner)}
            rows.extend(metrics.evaluate(drivers, [sc], config.env, config.game,
                                         config.eval, seed + s_idx))
    csv_path = os.path.join(out, "kpis.csv")
    metrics.write_csv(csv_path, rows)
    outputs.append(csv_path)
    runio.write_manifest(out, "baseline", config, seed, outputs, started,
                         workers=workers, deterministic=args.deterministic,
                         extra={"baseline": args.baseline})
    print(f"baseline {args.baseline} evaluated; results at {csv_path}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "theory": cmd_theory,
                "baseline": cmd_baseline}
    try:
        return handlers[args.subcommand](args)
    except (ConfigError, SizeError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ContractError, TrainingDiverged) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
