"""Task rewards, success predicates, and chunk-reward accumulation.

Every reward function accepts scalars or batched arrays (leading batch axis on
vectors) and returns a float or an array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RewardConfig

ORIENT_RADIUS = 0.3
NEAR_RADIUS = 1.2
FAR_RADIUS = 6.0
SUCCESS_RADIUS = 0.3
FRAME_RATE = 30


@dataclass
class ReachParams:
    alpha1: float = 4.0
    alpha2: float = 2.0
    lambda1: float = 0.05
    lambda2: float = 0.35
    beta1: float = 2.0
    beta2: float = 1.0
    c1: float = 0.05
    c2: float = 0.15
    v_threshold: float = 0.6
    w_threshold: float = 0.5
    r_sparse: float = 100.0

    def __post_init__(self):
        if self.lambda1 + self.lambda2 >= 1:
            raise ValueError("lambda1 + lambda2 must be < 1")
        for name in ("alpha1", "alpha2", "beta1", "beta2", "c1", "c2", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def far_goal(cls, cfg: RewardConfig, uneven: bool = False) -> "ReachParams":
        return cls(
            alpha1=cfg.uneven_alpha1 if uneven else cfg.alpha1,
            alpha2=cfg.alpha2,
            lambda1=cfg.uneven_lambda1 if uneven else cfg.lambda1,
            lambda2=cfg.uneven_lambda2 if uneven else cfg.lambda2,
            beta1=cfg.beta1, beta2=cfg.beta2, c1=cfg.c1, c2=cfg.c2,
            v_threshold=cfg.v_threshold, w_threshold=cfg.w_threshold, r_sparse=cfg.r_sparse)

    @classmethod
    def hand_reach(cls, cfg: RewardConfig) -> "ReachParams":
        # location reward only
        return cls(alpha1=cfg.hand_alpha1, alpha2=cfg.alpha2, lambda1=0.0, lambda2=0.0,
                   beta1=cfg.beta1, beta2=cfg.beta2, c1=cfg.c1, c2=cfg.c2,
                   v_threshold=cfg.v_threshold, w_threshold=cfg.w_threshold, r_sparse=cfg.r_sparse)


@dataclass
class VelocityParams:
    alpha3: float = 0.25
    lambda_soften: float = 0.05

    def __post_init__(self):
        if self.alpha3 <= 0 or self.lambda_soften <= 0:
            raise ValueError("alpha3 and lambda_soften must be positive")

    @classmethod
    def from_config(cls, cfg: RewardConfig) -> "VelocityParams":
        return cls(alpha3=cfg.alpha3, lambda_soften=cfg.lambda_soften)


def _dist(p_goal, p_joint):
    return np.linalg.norm(np.asarray(p_goal, dtype=np.float64) - np.asarray(p_joint, dtype=np.float64),
                          axis=-1)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def reward_location(p_goal, p_joint, alpha1):
    return _out(np.exp(-alpha1 * _dist(p_goal, p_joint)))


def reward_orientation(p_goal, p_joint, d_fwd, alpha2):
    """``d_fwd`` must live in the same space as the goal offset (2-D or 3-D)."""
    offset = np.asarray(p_goal, dtype=np.float64) - np.asarray(p_joint, dtype=np.float64)
    d = np.linalg.norm(offset, axis=-1)
    safe = np.where(d > 0, d, 1.0)
    d_goal = offset / np.expand_dims(safe, -1)
    d_fwd = np.asarray(d_fwd, dtype=np.float64)
    dot = np.where(d > 0, np.sum(d_fwd * d_goal, axis=-1), 1.0)
    r = np.where(d <= ORIENT_RADIUS, 1.0, np.exp(alpha2 * (dot - 1.0)))
    return _out(r)


def reward_stability(p_goal, p_joint, v, omega, params: ReachParams):
    d = _dist(p_goal, p_joint)
    v = np.asarray(v, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    c1 = np.where(v <= params.v_threshold, 0.0, params.c1)
    c2 = np.where(omega <= params.w_threshold, 0.0, params.c2)
    speed_term = c1 * v + c2 * omega
    r = np.where(d < NEAR_RADIUS, -params.beta1 * speed_term,
                 np.where(d < FAR_RADIUS, -params.beta2 * speed_term, 0.0))
    return _out(r + 0.0)


def reward_reach(p_goal, p_joint, d_fwd, v, omega, params: ReachParams, success_frame=False):
    """Weighted reach reward; ``success_frame`` adds the sparse bonus."""
    loc = reward_location(p_goal, p_joint, params.alpha1)
    ori = reward_orientation(p_goal, p_joint, d_fwd, params.alpha2)
    stab = reward_stability(p_goal, p_joint, v, omega, params)
    r = (1.0 - params.lambda1 - params.lambda2) * np.asarray(loc) + params.lambda1 * np.asarray(ori) \
        + params.lambda2 * np.asarray(stab)
    r = r + params.r_sparse * np.asarray(success_frame, dtype=np.float64)
    return _out(r)


def reward_velocity(v_joint, d_fwd, v_target, d_target, params: VelocityParams):
    v_joint = np.asarray(v_joint, dtype=np.float64)
    v_target = np.asarray(v_target, dtype=np.float64)
    align = (np.sum(np.asarray(d_fwd, dtype=np.float64) * np.asarray(d_target, dtype=np.float64),
                    axis=-1) + 1.0) / 2.0
    e = 1.0 - align
    lam = e / (e + params.lambda_soften)
    err2 = np.sum((v_target - v_joint) ** 2, axis=-1)
    return _out((1.0 - lam) * np.exp(-params.alpha3 * err2) + lam * align)


SUCCESS_FRAMES = {"far_goal": 15, "hand_reach": 6}


def success_predicate(task: str, distances=None, terminated=None, episode_frames: int = 200) -> bool:
    """Decide success from a per-frame distance (reach tasks) or termination (velocity) window."""
    if task == "velocity":
        term = np.asarray(terminated, dtype=bool)
        return bool(len(term) >= episode_frames and not term.any())
    need = SUCCESS_FRAMES[task]
    run = 0
    for d in np.asarray(distances, dtype=np.float64):
        run = run + 1 if d <= SUCCESS_RADIUS else 0
        if run >= need:
            return True
    return False


class SuccessTracker:
    """Batched consecutive-frame counter; ``update`` flags the frame the window completes."""

    def __init__(self, n: int, need: int):
        self.need = need
        self.run = np.zeros(n, dtype=np.int64)
        self.fired = np.zeros(n, dtype=bool)

    def reset(self, idx) -> None:
        self.run[idx] = 0
        self.fired[idx] = False

    def update(self, distance: np.ndarray, active=None) -> np.ndarray:
        inside = np.asarray(distance) <= SUCCESS_RADIUS
        if active is not None:
            inside &= active
        self.run = np.where(inside, self.run + 1, 0)
        first = (self.run >= self.need) & ~self.fired
        self.fired |= first
        return first


def chunk_reward(rewards, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 1:
        raise ValueError("chunk_reward needs a non-empty 1-D reward vector")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    total = 0.0
    for i, r in enumerate(rewards):
        total += gamma ** i * r
    return total
