"""Command-line entry point chaining data generation, prior training, noise navigation, and evaluation."""

from __future__ import annotations

import argparse
import csv
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from .nn import CheckpointError, ConfigError, TrainingError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 2, 3, 4


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def version_string() -> str:
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(args) -> C.RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"missing config {path}", EXIT_CONFIG)
        cfg = C.parse(path.read_text(), C.make_profile(args.profile, args.seed if args.seed is not None else 0))
    else:
        cfg = C.make_profile(args.profile, args.seed if args.seed is not None else 0)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.set:
        # one parse so overrides are validated together rather than in command-line order
        cfg = C.parse("\n".join(item.replace("=", " = ", 1) for item in args.set), cfg)
    C.validate(cfg)
    return cfg


def write_run_info(run_dir: Path, cfg: C.RunConfig, command: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    C.save(cfg, run_dir / "effective_config.txt")
    (run_dir / "run_info.txt").write_text(f"command = {command}\nversion = {version_string()}\nseed = {cfg.seed}\n")


def require(path, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}", EXIT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing {what}: {p}", EXIT_CONFIG)
    return p


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- subcommands --------------------------------------------------------------------------------

def cmd_gen_expert(args, cfg):
    from .expert import generate_dataset
    out = Path(args.out)
    write_run_info(out.parent, cfg, "gen-expert")
    ds = generate_dataset(cfg.expert.n_episodes, cfg.expert.episode_len, cfg.expert.repr, cfg.seed, cfg.sim,
                          cfg.expert)
    ds.save(out)
    print(f"wrote {len(ds.episodes)} episodes ({ds.n_frames} frames) to {out}")


def cmd_train_codec(args, cfg):
    from .codec import train_codec
    from .expert import TrajectoryDataset
    ds = TrajectoryDataset.load(require(args.data, "dataset"))
    out = Path(args.out)
    write_run_info(out.parent, cfg, "train-codec")
    codec = train_codec(ds, cfg.codec, cfg.seed, log=print)
    codec.save(out)
    if codec.train_rmse is not None:
        print("reconstruction rmse per action dim:", np.round(codec.train_rmse, 5).tolist())


def cmd_train_prior(args, cfg):
    from .codec import LatentCodec
    from .expert import TrajectoryDataset
    from .prior import train_prior
    ds = TrajectoryDataset.load(require(args.data, "dataset"))
    codec = LatentCodec.load(require(args.codec, "codec"))
    out = Path(args.out)
    write_run_info(out.parent, cfg, "train-prior")
    model, losses = train_prior(ds, codec, cfg.prior, cfg.seed, log=print)
    model.save(out)
    write_rows(out.with_name(out.stem + "_loss.csv"), ["epoch", "loss"], [[i, repr(l)] for i, l in enumerate(losses)])


def _steering_factory(cfg, prior, codec, k, action_only, seed):
    from .nav import NoiseController
    return lambda n: NoiseController(prior, codec, k, n, cfg, action_only=action_only, seed=seed)


def cmd_train_nav(args, cfg):
    from .codec import LatentCodec
    from .nav import RawController, train, write_log
    from .prior import DenoiserModel
    out = Path(args.out)
    codec = LatentCodec.load(require(args.codec, "codec"))
    k = args.k or cfg.ppo.k
    if args.raw_actions:
        # one decision per frame, so k times more macro-steps keeps the simulated-frame budget equal
        cfg = cfg.replace(ppo={"horizon": cfg.ppo.horizon * k})
        factory = lambda n: RawController(codec.action_mean, codec.action_std, cfg, codec.repr)  # noqa: E731
    else:
        prior = DenoiserModel.load(require(args.prior, "prior"))
        factory = _steering_factory(cfg, prior, codec, k, cfg.ppo.action_only_noise, cfg.seed)
    write_run_info(out.parent, cfg, "train-nav")
    res = train(cfg, args.task, factory, terrain=args.terrain, seed=cfg.seed, log=print)
    res.policy.save(out)
    write_log(res.log, out.with_name(out.stem + "_train.csv"))
    if res.curriculum is not None:
        write_rows(out.with_name(out.stem + "_curriculum.csv"), ["epoch", "tier", "mean_reward"],
                   [[e, t, repr(r)] for e, t, r in res.curriculum.events])


def _eval_setup(args, cfg):
    from .codec import LatentCodec
    from .metrics import ExpertController, ZeroAgent
    from .nav import NoisePolicy, RandomNoise, RawController
    from .prior import DenoiserModel
    if args.baseline == "expert":
        return ZeroAgent(), lambda n: ExpertController(cfg, n), None, False
    codec = LatentCodec.load(require(args.codec, "codec"))
    if args.baseline == "random":
        prior = DenoiserModel.load(require(args.prior, "prior"))
        k = args.k or cfg.ppo.k
        return RandomNoise(prior.d_x), _steering_factory(cfg, prior, codec, k, False, cfg.seed), prior, False
    policy = NoisePolicy.load(require(args.policy, "policy"))
    if policy.meta.get("controller") == "RawController":
        return policy, lambda n: RawController(codec.action_mean, codec.action_std, cfg, codec.repr), None, True
    prior = DenoiserModel.load(require(args.prior, "prior"))
    factory = _steering_factory(cfg, prior, codec, policy.meta.get("k", cfg.ppo.k),
                                bool(policy.meta.get("action_only", False)), cfg.seed)
    return policy, factory, prior, True


def cmd_eval(args, cfg):
    from .metrics import evaluate, write_report
    if args.policy is None and args.baseline is None:
        raise CliError("missing policy", EXIT_CONFIG)
    agent, factory, prior, deterministic = _eval_setup(args, cfg)
    out = Path(args.out)
    write_run_info(out, cfg, "eval")
    n = args.episodes or cfg.eval.n_episodes
    seed = args.seed if args.seed is not None else cfg.seed
    terrain_pool = None
    if args.terrain:
        from .envs import build_terrain_pool
        terrain_pool = build_terrain_pool(cfg, seed + 1)
    rep = evaluate(agent, factory, cfg, args.task, n, seed, terrain=args.terrain, eval_level=args.level,
                   terrain_pool=terrain_pool, deterministic=deterministic, prior=prior)
    write_report(rep, out, "eval")
    a = rep.aggregate
    print(f"success_rate={a['success_rate']:.3f} fall_rate={a['fall_rate']:.3f} jerk={a['jerk']} "
          f"vel_err={a['vel_err']} fps={a['fps']:.1f}")


def cmd_compare_guidance(args, cfg):
    from .codec import LatentCodec
    from .metrics import compare_efficiency, write_report
    from .nav import NoisePolicy, RandomNoise
    from .prior import DenoiserModel
    prior = DenoiserModel.load(require(args.prior, "prior"))
    codec = LatentCodec.load(require(args.codec, "codec"))
    policy = NoisePolicy.load(require(args.policy, "policy")) if args.policy else RandomNoise(prior.d_x)
    k = (policy.meta.get("k") if args.policy else None) or args.k or cfg.ppo.k
    out = Path(args.out)
    write_run_info(out, cfg, "compare-guidance")
    n = args.episodes or cfg.eval.n_episodes
    g = cfg.eval.guide_steps if args.guide_steps is None else args.guide_steps
    reports = compare_efficiency(policy, prior, codec, cfg, args.task, k, g, cfg.eval.guide_rate, n, cfg.seed)
    for label, rep in reports.items():
        write_report(rep, out, f"compare_{label}", path_label=label)
        a = rep.aggregate
        print(f"{label}: success_rate={a['success_rate']:.3f} fps={a['fps']:.1f} "
              f"nfe_fwd={a['nfe_fwd']} nfe_guid={a['nfe_guid']}")


def cmd_selftest(args, cfg):
    from .selftest import run_selftest
    if not run_selftest():
        raise CliError("selftest failed", EXIT_SELFTEST)


COMMANDS = {
    "gen-expert": cmd_gen_expert,
    "train-codec": cmd_train_codec,
    "train-prior": cmd_train_prior,
    "train-nav": cmd_train_nav,
    "eval": cmd_eval,
    "compare-guidance": cmd_compare_guidance,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisenav", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file (section.key = value lines)")
        sp.add_argument("--profile", default="desk", choices=sorted(C.PROFILES))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
        return sp

    common(sub.add_parser("gen-expert", help="generate the expert dataset")).add_argument("--out", required=True)
    sp = common(sub.add_parser("train-codec", help="train the latent action codec"))
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("train-prior", help="train the diffusion prior"))
    sp.add_argument("--data")
    sp.add_argument("--codec")
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("train-nav", help="train the noise navigation policy"))
    sp.add_argument("--prior")
    sp.add_argument("--codec")
    sp.add_argument("--task", required=True, choices=["far_goal", "hand_reach", "velocity"])
    sp.add_argument("--terrain", action="store_true")
    sp.add_argument("--k", type=int)
    sp.add_argument("--raw-actions", action="store_true", help="direct raw-action PPO baseline")
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("eval", help="evaluate a policy or baseline"))
    sp.add_argument("--policy")
    sp.add_argument("--baseline", choices=["random", "expert"])
    sp.add_argument("--prior")
    sp.add_argument("--codec")
    sp.add_argument("--task", required=True, choices=["far_goal", "hand_reach", "velocity"])
    sp.add_argument("--terrain", action="store_true")
    sp.add_argument("--level", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--out", required=True)
    sp = common(sub.add_parser("compare-guidance", help="steering vs loss-guided sampling"))
    sp.add_argument("--prior")
    sp.add_argument("--codec")
    sp.add_argument("--policy")
    sp.add_argument("--task", required=True, choices=["far_goal", "velocity"])
    sp.add_argument("--guide-steps", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--out", required=True)
    common(sub.add_parser("selftest", help="run the oracle suite"))
    return p


def _limit_threads():
    value = os.environ.get("NAP_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"NAP_THREADS must be a positive integer, got {value!r}", EXIT_CONFIG) from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        _limit_threads()
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"NAP-ERR: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"NAP-ERR: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, UsageError, CheckpointError, RuntimeError, OSError, ValueError) as e:
        msg = str(e).replace("\n", " ")
        print(f"NAP-ERR: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"done in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
