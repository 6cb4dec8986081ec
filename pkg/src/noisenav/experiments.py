"""Multi-stage experiment drivers built on the CLI, shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .cli import main


class StageError(RuntimeError):
    pass


def _run(argv) -> None:
    code = main([str(a) for a in argv])
    if code != 0:
        raise StageError(f"stage {argv[0]} exited with {code}")


def _common(profile: str, seed: int, overrides) -> list:
    out = ["--profile", profile, "--seed", seed]
    for item in overrides:
        out += ["--set", item]
    return out


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Artifacts:
    root: Path
    data: Path
    codec: Path
    prior: Path


def build_artifacts(root, seed: int, profile: str = "desk", repr: str = "compact", overrides=()) -> Artifacts:
    """Expert dataset, codec, and diffusion prior under ``root``."""
    root = Path(root)
    ov = [f"expert.repr={repr}", *overrides]
    art = Artifacts(root, root / "data" / "data.napd", root / "codec" / "codec.napc", root / "prior" / "prior.napc")
    c = _common(profile, seed, ov)
    _run(["gen-expert", *c, "--out", art.data])
    _run(["train-codec", *c, "--data", art.data, "--out", art.codec])
    _run(["train-prior", *c, "--data", art.data, "--codec", art.codec, "--out", art.prior])
    return art


@dataclass
class NavRun:
    policy: Path
    eval_dir: Path
    aggregate: dict
    train_log: list
    curriculum: list = field(default_factory=list)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    if v in ("", None):
        return None
    try:
        return float(v)
    except ValueError:
        return v


def train_and_eval(art: Artifacts, out, task: str, seed: int, profile: str = "desk", k: int | None = None,
                   action_only: bool = False, terrain: bool = False, raw: bool = False, episodes: int = 200,
                   eval_seed: int | None = None, eval_level: int | None = None, overrides=()) -> NavRun:
    """Train one navigation policy and evaluate it; paths and parsed CSVs are returned."""
    out = Path(out)
    ov = list(overrides) + (["ppo.action_only_noise=true"] if action_only else [])
    c = _common(profile, seed, ov)
    policy = out / "nav" / "policy.napc"
    argv = ["train-nav", *c, "--prior", art.prior, "--codec", art.codec, "--task", task, "--out", policy]
    if k is not None:
        argv += ["--k", k]
    if terrain:
        argv.append("--terrain")
    if raw:
        argv.append("--raw-actions")
    _run(argv)
    ev = evaluate_policy(art, policy, out / "eval", task, eval_seed if eval_seed is not None else 1000 + seed,
                         profile, terrain, eval_level, episodes, overrides)
    log = read_csv(out / "nav" / "policy_train.csv")
    cur_path = out / "nav" / "policy_curriculum.csv"
    cur = read_csv(cur_path) if cur_path.exists() else []
    return NavRun(policy, out / "eval", ev, log, cur)


def evaluate_policy(art: Artifacts, policy, out, task: str, seed: int, profile: str = "desk",
                    terrain: bool = False, eval_level: int | None = None, episodes: int = 200, overrides=(),
                    baseline: str | None = None) -> dict:
    argv = ["eval", *_common(profile, seed, overrides), "--prior", art.prior, "--codec", art.codec,
            "--task", task, "--episodes", episodes, "--out", out]
    argv += ["--baseline", baseline] if baseline else ["--policy", policy]
    if terrain:
        argv.append("--terrain")
        if eval_level is not None:
            argv += ["--level", eval_level]
    _run(argv)
    return {k: _num(v) for k, v in read_csv(Path(out) / "eval_aggregate.csv")[0].items()}


def compare_guidance(art: Artifacts, policy, out, task: str, seed: int, episodes: int, guide_steps: int = 10,
                     profile: str = "desk", overrides=()) -> dict:
    out = Path(out)
    _run(["compare-guidance", *_common(profile, seed, overrides), "--prior", art.prior, "--codec", art.codec,
          "--policy", policy, "--task", task, "--episodes", episodes, "--guide-steps", guide_steps,
          "--out", out])
    res = {}
    for label in ("steering", "guidance"):
        agg = {k: _num(v) for k, v in read_csv(out / f"compare_{label}_aggregate.csv")[0].items()}
        agg["episodes_rows"] = read_csv(out / f"compare_{label}_episodes.csv")
        res[label] = agg
    return res
