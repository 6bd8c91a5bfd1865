"""Command-line entry point: ``trajnav <command> [flags]``.

Exit status is 0 on success, 1 on configuration or runtime errors and 2 on
usage errors (argparse's default).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import flops as F
from . import train as TR
from .config import Config, ConfigError, load_config
from .env import GenerationError, SamplingError, default_vocab, generate_environment, sample_episode, save_env, \
    save_episodes
from .graph import ContractError
from .nn import CheckpointError, read_checkpoint, save_checkpoint
from .planner import NavModel
from .trace import export_trace, read_trace, replay

log = logging.getLogger("trajnav")

METRIC_KEYS = ("TL", "NE", "SR", "SPL", "nDTW", "sDTW")
REFERENCE_GFLOPS = {1: 0.6, 10: 0.9, 20: 1.2}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args):
    cfg = load_config(args.config, args.profile)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def out_dir(args):
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_model(path, model, cfg, **extra):
    save_checkpoint(path, model, cfg.as_dict(), extra)
    log.info("wrote checkpoint %s", path)


def load_model(path):
    header, state = read_checkpoint(path)
    cfg = Config.from_dict(header["config"])
    model = NavModel(cfg.model, seed=cfg.train.seed)
    model.load_state_dict(state)
    return cfg, model, header


def metrics_table(rows):
    """``rows`` is a list of (label, MetricsReport)."""
    width = max(len(label) for label, _ in rows)
    head = f"{'':<{width}}  " + "  ".join(f"{k:>6}" for k in METRIC_KEYS) + "  episodes"
    lines = [head]
    for label, rep in rows:
        vals = "  ".join(f"{getattr(rep, k):6.3f}" for k in METRIC_KEYS)
        lines.append(f"{label:<{width}}  {vals}  {rep.episodes:8d}")
    return "\n".join(lines)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def require_checkpoint(args):
    if not args.checkpoint:
        raise CliError(f"{args.command} requires --checkpoint")
    return load_model(args.checkpoint)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_env(args):
    cfg = resolve_config(args)
    seed = cfg.train.seed
    e = cfg.env
    env = generate_environment(seed, n_nodes=e.n_nodes, layout=e.layout, spacing=e.spacing,
                               landmark_count=e.landmark_count, stair_rise=e.stair_rise,
                               k_heading=e.k_heading, k_elevation=e.k_elevation)
    eps = [sample_episode(env, seed * 1_000_003 + i, e.min_len, e.max_len, e.fidelity,
                          cfg.eval.success_radius or None, episode_id=f"{seed}-{i}")
           for i in range(cfg.eval.episodes)]
    out = out_dir(args)
    save_env(out / f"env-{seed}.jsonl", env)
    save_episodes(out / f"episodes-{seed}.jsonl", eps)
    print(f"environment {seed}: {env.n_nodes} nodes, {len(env.edges)} edges, {len(eps)} episodes -> {out}")


def cmd_pretrain(args):
    cfg = resolve_config(args)
    out = out_dir(args)
    vocab = default_vocab()
    _, train_eps = TR.train_split(cfg)
    model = NavModel(cfg.model, seed=cfg.train.seed)
    t = cfg.train
    with open(out / "train_log.jsonl", "a") as fh:
        hist = TR.pretrain(model, train_eps, t.pretrain_steps, t.pretrain_batch, t.pretrain_lr, t.seed, vocab,
                           t.mask_rate, t.weight_decay, log_fh=fh)
    save_model(out / "pretrain.ckpt", model, cfg, stage="pretrain", steps=len(hist))
    if hist:
        print(f"pretrain: {len(hist)} steps, masked-token loss {hist[0]:.3f} -> {hist[-1]:.3f}")


def cmd_train(args):
    out = out_dir(args)
    vocab = default_vocab()
    if args.checkpoint:
        cfg, model, _ = load_model(args.checkpoint)
        if args.seed is not None:
            cfg.train.seed = args.seed
        pretrain_steps = 0
    else:
        cfg = resolve_config(args)
        model = NavModel(cfg.model, seed=cfg.train.seed)
        pretrain_steps = cfg.train.pretrain_steps
    t = cfg.train
    _, train_eps = TR.train_split(cfg)
    _, eval_eps = TR.eval_split(cfg)
    probe = eval_eps[: min(50, len(eval_eps))]

    def probe_eval():
        rep = TR.evaluate(model, probe, vocab, step_budget=cfg.eval.step_budget or None)
        return {k: round(v, 4) for k, v in rep.as_dict().items()}

    with open(out / "train_log.jsonl", "a") as fh:
        if pretrain_steps:
            TR.pretrain(model, train_eps, pretrain_steps, t.pretrain_batch, t.pretrain_lr, t.seed, vocab,
                        t.mask_rate, t.weight_decay, log_fh=fh)
        TR.finetune(model, train_eps, t.iterations, t.batch, t.lr, t.seed, vocab, t.lam, t.weight_decay,
                    t.pseudo_metric, cfg.eval.step_budget or None, log_fh=fh, eval_fn=probe_eval,
                    eval_every=t.eval_every)
    save_model(out / "model.ckpt", model, cfg, stage="finetune", iterations=t.iterations)
    report = TR.evaluate(model, eval_eps, vocab, step_budget=cfg.eval.step_budget or None)
    print(metrics_table([("held-out", report)]))
    write_json(out / "metrics.json", {"config_hash": cfg.hash(), "held_out": report.as_dict()})


def cmd_eval(args):
    cfg, model, header = require_checkpoint(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    vocab = default_vocab()
    _, eval_eps = TR.eval_split(cfg)
    budget = cfg.eval.step_budget or None
    rows = [(args.policy, TR.evaluate(model, eval_eps, vocab, args.policy, seed=cfg.train.seed,
                                      step_budget=budget))]
    if args.baseline and args.policy != "random":
        rows.append(("random", TR.evaluate(model, eval_eps, vocab, "random", seed=cfg.train.seed,
                                           step_budget=budget)))
    print(metrics_table(rows))
    report = {"config_hash": header["config_hash"], "checkpoint": Path(args.checkpoint).name,
              "results": {label: rep.as_dict() for label, rep in rows}}
    write_json(out_dir(args) / "metrics.json", report)


def cmd_bench_flops(args):
    cfg = resolve_config(args)
    bench = F.BenchModelConfig.from_config(cfg)
    scenario = F.FlopsScenario(steps=args.steps)
    reports = {m: F.analytic(bench, scenario, m) for m in F.MODES}
    if args.verify:
        for m in args.verify:
            concrete = F.ConcreteScenario(bench).run(scenario, m)
            if concrete.per_step != reports[m].per_step or concrete.setup != reports[m].setup:
                raise CliError(f"{m}: analytic and runtime FLOP counts disagree")
            print(f"{m}: analytic counts match the runtime counter over {scenario.steps} steps")
    marks = [s for s in (1, 10, 20) if s <= scenario.steps]
    print(f"profile {cfg.profile}: d={bench.d} views={bench.k_views} layers OPE/MAM/CCM="
          f"{bench.ope_layers}/{bench.mam_layers}/{bench.ccm_layers}")
    print(f"{'mode':<12}" + "".join(f"{'step ' + str(s):>12}" for s in marks) + f"{'cumulative':>14}")
    for m, rep in reports.items():
        cells = "".join(f"{rep.per_step[s - 1] / 1e9:12.3f}" for s in marks)
        print(f"{m:<12}{cells}{rep.cumulative[-1] / 1e9:14.2f}")
    inc = reports["incremental"]
    print("incremental breakdown (GFLOPs):")
    for s in marks:
        b = inc.breakdown[s - 1]
        print(f"  step {s:>2}: " + "  ".join(f"{k}={v / 1e9:.3f}" for k, v in b.items()))
    print(f"instruction keys/values (once per episode): {inc.setup / 1e9:.3f} GFLOPs")
    if cfg.profile == "paper-faithful":
        cmp_ = "  ".join(f"step {s}: {inc.per_step[s - 1] / 1e9:.2f} vs {REFERENCE_GFLOPS[s]}" for s in marks)
        print(f"published reference (GFLOPs): {cmp_}")
    write_json(out_dir(args) / "bench_flops.json", {
        "profile": cfg.profile,
        "config_hash": cfg.hash(),
        "scenario": scenario.__dict__,
        "parameters": F.parameter_counts(bench),
        "modes": {m: {"per_step": r.per_step, "cumulative": [int(x) for x in r.cumulative],
                      "breakdown": r.breakdown, "setup": r.setup} for m, r in reports.items()},
    })


def cmd_trace(args):
    cfg, model, header = require_checkpoint(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    vocab = default_vocab()
    envs, eval_eps = TR.eval_split(cfg)
    if args.replay:
        head, steps = read_trace(args.replay)
        env = next((e for e in envs if e.seed == head["env"]["seed"]), None)
        if env is None:
            raise CliError(f"environment {head['env']['seed']} is not part of the held-out split")
        worst = replay(model, head, steps, env, vocab)
        print(f"replayed {len(steps)} steps, max score difference {worst:.3g}")
        if worst > 1e-6:
            raise CliError("replay diverged from the recorded scores")
        return
    if not 0 <= args.episode < len(eval_eps):
        raise CliError(f"episode index {args.episode} outside [0, {len(eval_eps)})")
    ep = eval_eps[args.episode]
    _, _, runs = TR.evaluate(model, [ep], vocab, seed=cfg.train.seed,
                             step_budget=cfg.eval.step_budget or None, return_runs=True)
    path = out_dir(args) / f"trace-{ep.episode_id}.jsonl"
    n = export_trace(path, runs[0], header["config_hash"])
    print(f"wrote {n} lines to {path}")


COMMANDS = {
    "gen-env": cmd_gen_env,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-flops": cmd_bench_flops,
    "trace": cmd_trace,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint (.ckpt)")
    common.add_argument("--profile", choices=("desk", "paper-faithful"))
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="trajnav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "eval":
            p.add_argument("--policy", choices=("greedy", "sample", "random"), default="greedy")
            p.add_argument("--baseline", action="store_true", help="also report a uniform random agent")
        elif name == "bench-flops":
            p.add_argument("--steps", type=int, default=20)
            p.add_argument("--verify", nargs="*", choices=F.MODES,
                           help="re-run modes through the real modules and compare counts")
        elif name == "trace":
            p.add_argument("--episode", type=int, default=0, help="index into the held-out episodes")
            p.add_argument("--replay", help="trace file to replay against the checkpoint")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (CliError, ConfigError, CheckpointError, ContractError, GenerationError, SamplingError,
            OSError, ValueError) as exc:
        print(f"trajnav {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
