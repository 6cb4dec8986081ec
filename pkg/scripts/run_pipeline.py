#!/usr/bin/env python3
"""Full desk pipeline: expert data, codec, prior, far-goal navigation, evaluation, guidance comparison."""

import argparse
import json
from pathlib import Path

from noisenav.experiments import build_artifacts, compare_guidance, evaluate_policy, train_and_eval


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", default="runs/pipeline")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--profile", default="desk")
    p.add_argument("--task", default="far_goal", choices=["far_goal", "hand_reach", "velocity"])
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = p.parse_args()
    root = Path(args.root)
    art = build_artifacts(root, args.seed, args.profile, overrides=args.set)
    run = train_and_eval(art, root / "policy", args.task, args.seed, args.profile, episodes=args.episodes,
                         overrides=args.set)
    rand = evaluate_policy(art, None, root / "random", args.task, 1000 + args.seed, args.profile,
                           episodes=args.episodes, overrides=args.set, baseline="random")
    summary = {"policy": run.aggregate, "random": rand}
    if args.task != "hand_reach":
        cmp = compare_guidance(art, run.policy, root / "guidance", args.task, args.seed, 20, profile=args.profile,
                               overrides=args.set)
        summary["guidance"] = {k: {kk: vv for kk, vv in v.items() if kk != "episodes_rows"} for k, v in cmp.items()}
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
