"""Vectorized task environments: far-goal reaching, hand reaching, and velocity control."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import RunConfig
from .expert import local_dim, state_local
from .nn import ConfigError
from .rewards import SUCCESS_FRAMES, ReachParams, SuccessTracker, VelocityParams, reward_reach, \
    reward_velocity
from .sim import CharacterState, hand_position, heading, spawn, step
from .terrain import KINDS, TerrainBank, flat, generate_terrain, heightmap_sample

TASKS = ("far_goal", "hand_reach", "velocity")
TASK_DIMS = {"far_goal": 3, "hand_reach": 6, "velocity": 3}


def build_terrain_pool(cfg: RunConfig, seed: int):
    """One bank holding ``pool_per_cell`` terrains for every (level, kind) cell.

    Returns ``(bank, index)`` where ``index[level][kind]`` lists terrain ids.
    """
    fields, index = [], []
    ss = np.random.SeedSequence(seed)
    cur = cfg.curriculum
    for level in range(cur.levels):
        row = {}
        for kind in KINDS:
            ids = []
            for _ in range(cur.pool_per_cell):
                child = int(ss.spawn(1)[0].generate_state(1)[0])
                ids.append(len(fields))
                fields.append(generate_terrain(kind, level, child, cfg.sim.arena_half, cfg.sim.cell))
            row[kind] = ids
        index.append(row)
    return TerrainBank(fields), index


class NavEnv:
    """``n`` parallel episodes of one task.

    ``mode`` is ``"train"`` (annulus goals, resampling hand targets) or
    ``"eval"`` (fixed evaluation geometry, single hand target).
    """

    def __init__(self, task: str, n: int, cfg: RunConfig, seed: int, mode: str = "train",
                 terrain: bool = False, terrain_pool=None, levels=(0,), eval_level: int | None = None):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.task, self.n, self.cfg, self.mode, self.terrain = task, n, cfg, mode, terrain
        self.sim_cfg = cfg.sim
        self.tcfg = cfg.task
        if task == "velocity":
            # a full-speed episode must not run out of arena
            reach = cfg.task.velocity_max * cfg.task.velocity_episode_frames * cfg.sim.dt + 2.0
            self.sim_cfg = replace(cfg.sim, arena_half=max(cfg.sim.arena_half, reach))
        ss = np.random.SeedSequence(seed)
        env_seq, goal_seq = ss.spawn(2)
        self.rngs = [np.random.default_rng(s) for s in env_seq.spawn(n)]
        self.goal_rng = np.random.default_rng(goal_seq)
        if terrain:
            self.bank, self.pool = terrain_pool or build_terrain_pool(cfg, seed + 1)
        else:
            self.bank, self.pool = TerrainBank([flat(self.sim_cfg.arena_half, cfg.sim.cell)]), None
        self.levels = tuple(levels)
        self.eval_level = eval_level
        self.goal_scale = 1.0
        self.reach = ReachParams.far_goal(cfg.reward, uneven=terrain) if task == "far_goal" \
            else ReachParams.hand_reach(cfg.reward)
        self.vel = VelocityParams.from_config(cfg.reward)
        self.episode_frames = {"far_goal": self.tcfg.far_episode_frames,
                               "hand_reach": self.tcfg.hand_episode_frames if mode == "train"
                               else self.tcfg.hand_target_period,
                               "velocity": self.tcfg.velocity_episode_frames}[task]
        self.tracker = SuccessTracker(n, SUCCESS_FRAMES.get(task, 1))
        self.tid = np.zeros(n, dtype=np.int64)
        self.level = np.zeros(n, dtype=np.int64)
        self.state = CharacterState.zeros(n, cfg.sim.body_offset)
        self.goal = np.zeros((n, 3))
        self.v_target = np.zeros((n, 2))
        self.frame = np.zeros(n, dtype=np.int64)
        self.target_frame = np.zeros(n, dtype=np.int64)
        self.success = np.zeros(n, dtype=bool)
        self.ep_return = np.zeros(n)
        self.reset(np.arange(n))

    # -- dimensions ------------------------------------------------------------------------
    def prop_dim(self, variant: str) -> int:
        return local_dim(variant)

    @property
    def task_dim(self) -> int:
        return TASK_DIMS[self.task]

    @property
    def heightmap_dim(self) -> int:
        return self.sim_cfg.heightmap_n ** 2 if self.terrain else 0

    # -- episode management ------------------------------------------------------------------
    def set_curriculum(self, levels, goal_scale: float) -> None:
        self.levels = tuple(levels)
        self.goal_scale = goal_scale

    def _pick_terrain(self, idx):
        if not self.terrain:
            self.tid[idx] = 0
            return
        rng = self.goal_rng
        props = np.asarray(self.cfg.curriculum.proportions, dtype=np.float64)
        for i in idx:
            level = self.eval_level if self.eval_level is not None else int(rng.choice(self.levels))
            kind = KINDS[int(rng.choice(len(KINDS), p=props / props.sum()))]
            self.tid[i] = int(rng.choice(self.pool[level][kind]))
            self.level[i] = level

    def _sample_goal(self, idx):
        rng = self.goal_rng
        m = len(idx)
        t = self.tcfg
        st = self.state.take(idx)
        if self.task == "far_goal":
            if self.mode == "eval":
                dist = np.full(m, t.eval_goal_distance)
                ang = st.theta + np.deg2rad(rng.uniform(-t.eval_goal_sector_deg, t.eval_goal_sector_deg, m))
            else:
                hi = max(t.far_goal_min, t.far_goal_radius * self.goal_scale)
                dist = rng.uniform(t.far_goal_min, hi, m)
                ang = rng.uniform(-np.pi, np.pi, m)
            xy = st.p + dist[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            self.goal[idx, :2] = xy
            self.goal[idx, 2] = 0.0
        elif self.task == "hand_reach":
            r = t.hand_radius * np.sqrt(rng.uniform(0, 1, m))
            ang = rng.uniform(-np.pi, np.pi, m)
            xy = st.p + r[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            ground = self.bank.height(self.tid[idx], xy)
            self.goal[idx, :2] = xy
            self.goal[idx, 2] = ground + rng.uniform(t.hand_height_min, t.hand_height_max, m)
        else:
            speed = rng.uniform(0.0, t.velocity_max, m)
            ang = rng.uniform(-np.pi, np.pi, m)
            self.v_target[idx] = speed[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.target_frame[idx] = 0
        self.tracker.reset(idx)

    def reset(self, idx) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if len(idx) == 0:
            return
        self._pick_terrain(idx)
        theta = self.goal_rng.uniform(-np.pi, np.pi, len(idx))
        self.state.put(idx, spawn(self.bank, self.tid[idx], np.zeros((len(idx), 2)), theta, self.sim_cfg))
        self.frame[idx] = 0
        self.success[idx] = False
        self.ep_return[idx] = 0.0
        self._sample_goal(idx)

    # -- observation ---------------------------------------------------------------------------
    def task_features(self) -> np.ndarray:
        s = self.state
        fwd = heading(s.theta)
        right = np.stack([fwd[:, 1], -fwd[:, 0]], axis=1)

        def body(w):
            return np.stack([np.sum(w * right, axis=1), np.sum(w * fwd, axis=1)], axis=1)

        if self.task == "far_goal":
            off = self.goal[:, :2] - s.p
            d = np.linalg.norm(off, axis=1, keepdims=True)
            return np.concatenate([body(off), np.minimum(d, 8.0)], axis=1)
        if self.task == "hand_reach":
            hand = hand_position(s, self.sim_cfg)
            base = self.bank.height(self.tid, s.p)
            off_root = self.goal - np.concatenate([s.p, base[:, None]], axis=1)
            off_hand = self.goal - hand
            return np.concatenate([body(off_root[:, :2]), off_root[:, 2:], body(off_hand[:, :2]),
                                   off_hand[:, 2:]], axis=1)
        vt = body(self.v_target)
        speed = np.linalg.norm(vt, axis=1, keepdims=True)
        safe = np.where(speed > 1e-9, speed, 1.0)
        dirn = np.where(speed > 1e-9, vt / safe, np.array([0.0, 1.0]))
        return np.concatenate([speed, dirn], axis=1)

    def heightmap(self) -> np.ndarray:
        s = self.state
        return heightmap_sample(self.bank, self.tid, s.p, s.theta, s.z_body - self.sim_cfg.body_offset,
                                n=self.sim_cfg.heightmap_n)

    def prop(self, variant: str) -> np.ndarray:
        return state_local(self.state, variant, self.sim_cfg)

    # -- dynamics --------------------------------------------------------------------------------
    def goal_distance(self) -> np.ndarray:
        if self.task == "far_goal":
            return np.linalg.norm(self.goal[:, :2] - self.state.p, axis=1)
        if self.task == "hand_reach":
            return np.linalg.norm(self.goal - hand_position(self.state, self.sim_cfg), axis=1)
        return np.zeros(self.n)

    def step(self, action: np.ndarray, active: np.ndarray):
        """Advance active environments one frame.

        Returns ``(reward, terminated, truncated, success_event)``; inactive
        entries are zero/false and their state is left untouched.
        """
        nxt, fell = step(self.state, action, self.bank, self.tid, self.rngs, self.sim_cfg)
        idx = np.flatnonzero(active)
        self.state.put(idx, nxt.take(idx))
        self.frame[idx] += 1
        self.target_frame[idx] += 1
        s = self.state
        fwd = heading(s.theta)
        if self.task == "velocity":
            vt = self.v_target
            norm = np.linalg.norm(vt, axis=1, keepdims=True)
            d_t = np.where(norm > 1e-9, vt / np.where(norm > 1e-9, norm, 1.0), fwd)
            r = reward_velocity(s.v, fwd, vt, d_t, self.vel)
            event = np.zeros(self.n, dtype=bool)
        else:
            dist = self.goal_distance()
            event = self.tracker.update(dist, active)
            if self.task == "far_goal":
                p_joint, goal, d_fwd = s.p, self.goal[:, :2], fwd
            else:
                p_joint, goal = hand_position(s, self.sim_cfg), self.goal
                d_fwd = np.concatenate([fwd, np.zeros((self.n, 1))], axis=1)
            r = reward_reach(goal, p_joint, d_fwd, np.linalg.norm(s.v, axis=1), np.abs(s.omega),
                             self.reach, success_frame=event)
        r = np.where(active, r, 0.0)
        fell = fell & active
        event = event & active
        self.success |= event
        self.ep_return += r
        terminated = fell.copy()
        if self.task == "far_goal" or (self.task == "hand_reach" and self.mode == "eval"):
            terminated |= event
        truncated = active & ~terminated & (self.frame >= self.episode_frames)
        if self.task == "hand_reach" and self.mode == "train":
            resample = active & ~terminated & ~truncated & (
                event | (self.target_frame >= self.tcfg.hand_target_period))
            if np.any(resample):
                self._sample_goal(np.flatnonzero(resample))
        return r, terminated, truncated, event
