#!/usr/bin/env python3
"""Ablation sweeps: state representation, joint vs action-only noise, and chunk size on terrain."""

import argparse
import json
from pathlib import Path

import numpy as np

from noisenav.experiments import build_artifacts, train_and_eval

STUDIES = ("repr", "noise_space", "chunk")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", default="runs/ablations")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--study", choices=STUDIES, nargs="+", default=list(STUDIES))
    p.add_argument("--episodes", type=int, default=200)
    args = p.parse_args()
    root = Path(args.root)
    arts = {"compact": build_artifacts(root / "compact", 0)}
    variants = {}
    if "repr" in args.study:
        arts["root_only"] = build_artifacts(root / "root_only", 0, repr="root_only")
        variants["repr/compact"] = ("compact", dict(task="far_goal"))
        variants["repr/root_only"] = ("root_only", dict(task="far_goal"))
    if "noise_space" in args.study:
        variants["noise/joint"] = ("compact", dict(task="hand_reach"))
        variants["noise/action_only"] = ("compact", dict(task="hand_reach", action_only=True))
    if "chunk" in args.study:
        for k in (4, 16):
            variants[f"chunk/k{k}"] = ("compact", dict(task="far_goal", k=k, terrain=True, eval_level=4))
    table = {}
    for name, (art_key, kw) in variants.items():
        rates = []
        for seed in args.seeds:
            run = train_and_eval(arts[art_key], root / name / f"seed{seed}", seed=seed, episodes=args.episodes, **kw)
            rates.append(run.aggregate["success_rate"])
        table[name] = {"success": rates, "mean": float(np.mean(rates))}
        print(name, table[name], flush=True)
    (root / "ablations.json").write_text(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
