"""Scripted expert, canonicalized state features, and the trajectory dataset file.

Feature layouts (per frame):

* ``root_only`` (7): position (2), heading as (cos, sin) (2), velocity (2), yaw rate (1)
* ``compact`` (13): root + joint angles (balance, shoulder, elbow) + their rates
* ``full`` (21): compact + local elbow/hand positions (forward, up) and their velocities

Root features are expressed in the frame of an anchor state, where the anchor
sits at the origin facing +y (so the anchor's heading encodes as (0, 1)).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExpertConfig, SimConfig
from .nn import CheckpointError, ConfigError
from .sim import ACTION_DIM, CharacterState, heading, step
from .terrain import flat, TerrainBank

REPRS = ("full", "compact", "root_only")
REPR_TAGS = {"full": 0, "compact": 1, "root_only": 2}
REPR_DIMS = {"root_only": 7, "compact": 13, "full": 21}
ROOT = slice(0, 7)
POS, HEAD, VEL, YAW = slice(0, 2), slice(2, 4), slice(4, 6), 6
# local (anchor-free) features drop position and heading
LOCAL_START = 4
DATA_MAGIC = b"NAPD"
DATA_VERSION = 1


class GenerationError(RuntimeError):
    pass


def repr_dim(variant: str) -> int:
    if variant not in REPR_DIMS:
        raise ConfigError(f"unknown state representation {variant!r}")
    return REPR_DIMS[variant]


def local_dim(variant: str) -> int:
    return repr_dim(variant) - LOCAL_START


def compact_index_in_full() -> np.ndarray:
    """Indices of the compact features inside the full layout (compact is a prefix)."""
    return np.arange(REPR_DIMS["compact"])


def _arm_locals(state: CharacterState, cfg: SimConfig) -> np.ndarray:
    l0, l1 = cfg.arm_lengths
    q0, q1 = state.q[:, 0], state.q[:, 1]
    qd0, qd1 = state.q_dot[:, 0], state.q_dot[:, 1]
    ef, eu = l0 * np.sin(q0), -l0 * np.cos(q0)
    hf, hu = ef + l1 * np.sin(q0 + q1), eu - l1 * np.cos(q0 + q1)
    efd, eud = l0 * np.cos(q0) * qd0, l0 * np.sin(q0) * qd0
    hfd = efd + l1 * np.cos(q0 + q1) * (qd0 + qd1)
    hud = eud + l1 * np.sin(q0 + q1) * (qd0 + qd1)
    return np.stack([ef, eu, hf, hu, efd, eud, hfd, hud], axis=1)


def canonicalize(frames: CharacterState, variant: str = "compact", sim_cfg: SimConfig | None = None,
                 anchor: CharacterState | None = None) -> np.ndarray:
    """Features of each frame relative to ``anchor`` (default: the first frame)."""
    if len(frames) == 0:
        raise ValueError("canonicalize needs a non-empty window")
    repr_dim(variant)
    sim_cfg = sim_cfg or SimConfig()
    a = frames.take(0) if anchor is None else anchor
    ap, at = a.p[0], a.theta[0]
    fwd = np.array([np.cos(at), np.sin(at)])
    right = np.array([np.sin(at), -np.cos(at)])

    def rot(w):
        return np.stack([w @ right, w @ fwd], axis=-1)

    d = frames.theta - at
    cols = [rot(frames.p - ap), np.stack([-np.sin(d), np.cos(d)], axis=1), rot(frames.v),
            frames.omega[:, None]]
    if variant in ("compact", "full"):
        cols += [frames.b[:, None], frames.q, frames.b_dot[:, None], frames.q_dot]
    if variant == "full":
        cols.append(_arm_locals(frames, sim_cfg))
    return np.concatenate(cols, axis=1)


def reanchor(features: np.ndarray, anchor_row: np.ndarray) -> np.ndarray:
    """Re-express canonical feature rows in the frame of ``anchor_row`` (same layout).

    ``anchor_row`` may carry leading batch axes matching ``features[..., T, D]``.
    """
    f = np.array(features, dtype=np.float64, copy=True)
    a = np.asarray(anchor_row, dtype=np.float64)
    if a.ndim < f.ndim:
        a = a[..., None, :]
    ax, ay = a[..., 2], a[..., 3]  # anchor forward axis

    def rot(wx, wy):
        return wx * ay - wy * ax, wx * ax + wy * ay

    f[..., 0], f[..., 1] = rot(f[..., 0] - a[..., 0], f[..., 1] - a[..., 1])
    f[..., 2], f[..., 3] = rot(f[..., 2].copy(), f[..., 3].copy())
    f[..., 4], f[..., 5] = rot(f[..., 4].copy(), f[..., 5].copy())
    return f


def self_local(features: np.ndarray) -> np.ndarray:
    """Anchor-free per-frame features: each row re-expressed in its own frame, minus pose."""
    f = np.asarray(features, dtype=np.float64)
    hx, hy = f[..., 2], f[..., 3]
    vx, vy = f[..., 4], f[..., 5]
    out = f[..., LOCAL_START:].copy()
    out[..., 0] = vx * hy - vy * hx
    out[..., 1] = vx * hx + vy * hy
    return out


def state_local(state: CharacterState, variant: str, sim_cfg: SimConfig) -> np.ndarray:
    """Anchor-free features of live states, row per environment."""
    fwd = heading(state.theta)
    right = np.stack([fwd[:, 1], -fwd[:, 0]], axis=1)
    cols = [np.sum(state.v * right, axis=1)[:, None], np.sum(state.v * fwd, axis=1)[:, None],
            state.omega[:, None]]
    if variant in ("compact", "full"):
        cols += [state.b[:, None], state.q, state.b_dot[:, None], state.q_dot]
    if variant == "full":
        cols.append(_arm_locals(state, sim_cfg))
    return np.concatenate(cols, axis=1)


def state_anchored(state: CharacterState, anchor: CharacterState, variant: str,
                   sim_cfg: SimConfig) -> np.ndarray:
    """Per-environment features of ``state`` in the frame of ``anchor`` (row-wise pairs)."""
    fwd = heading(anchor.theta)
    right = np.stack([fwd[:, 1], -fwd[:, 0]], axis=1)

    def rot(w):
        return np.stack([np.sum(w * right, axis=1), np.sum(w * fwd, axis=1)], axis=1)

    d = state.theta - anchor.theta
    cols = [rot(state.p - anchor.p), np.stack([-np.sin(d), np.cos(d)], axis=1), rot(state.v),
            state.omega[:, None]]
    if variant in ("compact", "full"):
        cols += [state.b[:, None], state.q, state.b_dot[:, None], state.q_dot]
    if variant == "full":
        cols.append(_arm_locals(state, sim_cfg))
    return np.concatenate(cols, axis=1)


# --- expert controller ---------------------------------------------------------------

@dataclass
class Waypoint:
    pos: np.ndarray  # (n, 2)
    speed: np.ndarray  # (n,)
    arm: np.ndarray = None  # (n, 2) arm posture

    def __post_init__(self):
        self.pos = np.atleast_2d(np.asarray(self.pos, dtype=np.float64))
        n = len(self.pos)
        self.speed = np.broadcast_to(np.asarray(self.speed, dtype=np.float64), (n,)).copy()
        if self.arm is None:
            self.arm = np.zeros((n, 2))
        self.arm = np.broadcast_to(np.asarray(self.arm, dtype=np.float64), (n, 2)).copy()


def expert_act(state: CharacterState, waypoint: Waypoint, sim_cfg: SimConfig, cfg: ExpertConfig,
               phase=0.0) -> np.ndarray:
    """Waypoint pursuit, linear balance feedback, and speed-scaled arm swing."""
    to_wp = waypoint.pos - state.p
    dist = np.linalg.norm(to_wp, axis=1)
    unit = to_wp / np.maximum(dist, 1e-9)[:, None]
    v_des = unit * np.minimum(waypoint.speed, cfg.kpos * dist)[:, None]
    drive = cfg.kv * (v_des - state.v) + sim_cfg.drag * state.v
    norm = np.linalg.norm(drive, axis=1)
    drive *= np.minimum(1.0, sim_cfg.a_max / np.maximum(norm, 1e-12))[:, None]
    fwd = heading(state.theta)
    left = np.stack([-fwd[:, 1], fwd[:, 0]], axis=1)
    torque = cfg.kb * state.b + cfg.kbd * state.b_dot
    speed = np.linalg.norm(state.v, axis=1)
    amp = cfg.swing_amp * np.minimum(speed / 2.0, 1.0)
    s = np.sin(np.asarray(phase, dtype=np.float64))
    q_target = waypoint.arm + np.stack([amp * s, 0.5 * amp * s], axis=1)
    q_target = np.clip(q_target, sim_cfg.q_min, sim_cfg.q_max)
    return np.concatenate([
        np.sum(drive * fwd, axis=1)[:, None], np.sum(drive * left, axis=1)[:, None],
        torque[:, None], q_target], axis=1)


class ExpertScript:
    """Random waypoint scripts for a batch of expert rollouts (with pauses and arm postures)."""

    def __init__(self, state: CharacterState, rng: np.random.Generator, sim_cfg: SimConfig,
                 cfg: ExpertConfig):
        n = len(state)
        self.rng, self.sim_cfg, self.cfg = rng, sim_cfg, cfg
        self.wp = Waypoint(state.p.copy(), np.zeros(n), np.zeros((n, 2)))
        self.arm_cmd = np.zeros((n, 2))
        self.phase = np.zeros(n)
        self.pause = np.zeros(n, dtype=np.int64)
        self.timer = np.zeros(n, dtype=np.int64)
        self._new(np.arange(n), state)

    def _new(self, idx, state: CharacterState) -> None:
        if len(idx) == 0:
            return
        rng, cfg = self.rng, self.cfg
        m = len(idx)
        ang = state.theta[idx] + rng.uniform(-np.pi, np.pi, m)
        dist = rng.uniform(0.5, 6.0, m)
        target = state.p[idx] + dist[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        lim = self.sim_cfg.arena_half - 2.0
        self.wp.pos[idx] = np.clip(target, -lim, lim)
        self.wp.speed[idx] = rng.uniform(cfg.speed_min, cfg.speed_max, m)
        reach = rng.uniform(size=m) < cfg.reach_prob
        arm = np.stack([rng.uniform(0.0, 2.8, m), rng.uniform(0.0, 2.0, m)], axis=1)
        self.wp.arm[idx] = np.where(reach[:, None], arm, 0.0)
        self.pause[idx] = -1
        self.timer[idx] = 0

    def act(self, state: CharacterState) -> np.ndarray:
        cfg = self.cfg
        dt = self.sim_cfg.dt
        step_max = cfg.arm_rate * dt
        self.arm_cmd += np.clip(self.wp.arm - self.arm_cmd, -step_max, step_max)
        wp = Waypoint(self.wp.pos, self.wp.speed, self.arm_cmd)
        a = expert_act(state, wp, self.sim_cfg, cfg, self.phase)
        self.phase += np.linalg.norm(state.v, axis=1) * dt * 2 * np.pi / cfg.stride
        self.timer += 1
        dist = np.linalg.norm(self.wp.pos - state.p, axis=1)
        speed = np.linalg.norm(state.v, axis=1)
        arrived = (self.pause < 0) & (((dist < 0.2) & (speed < 0.3)) | (self.timer > 240))
        self.pause[arrived] = self.rng.integers(0, 30, int(arrived.sum()))
        waiting = self.pause >= 0
        self.pause[waiting] -= 1
        done = waiting & (self.pause < 0)
        self._new(np.flatnonzero(done), state)
        return a


# --- dataset ----------------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    episodes: list[np.ndarray]  # each (T, feature_dim + action_dim) float32
    repr: str
    feature_dim: int
    action_dim: int = ACTION_DIM
    seed: int = 0
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean, self.std = self.compute_stats()

    def compute_stats(self):
        allf = np.concatenate(self.episodes).astype(np.float64)
        mean = allf.mean(axis=0)
        std = np.maximum(allf.std(axis=0), 1e-6)
        return mean.astype(np.float32), std.astype(np.float32)

    def features(self, i: int) -> np.ndarray:
        return self.episodes[i][:, :self.feature_dim].astype(np.float64)

    def actions(self, i: int) -> np.ndarray:
        return self.episodes[i][:, self.feature_dim:].astype(np.float64)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean.astype(np.float64)) / self.std.astype(np.float64)

    @property
    def n_frames(self) -> int:
        return sum(len(e) for e in self.episodes)

    def to_bytes(self) -> bytes:
        out = [DATA_MAGIC, struct.pack("<IBIII", DATA_VERSION, REPR_TAGS[self.repr], self.feature_dim,
                                       self.action_dim, len(self.episodes))]
        for ep in self.episodes:
            out.append(struct.pack("<I", len(ep)))
            out.append(np.ascontiguousarray(ep, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(self.mean, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(self.std, dtype="<f4").tobytes())
        return b"".join(out)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrajectoryDataset":
        if data[:4] != DATA_MAGIC:
            raise CheckpointError(f"bad magic: expected {DATA_MAGIC!r}, got {bytes(data[:4])!r}")
        pos = 4
        if len(data) < pos + 17:
            raise CheckpointError("truncated dataset header")
        version, tag, fdim, adim, n_eps = struct.unpack_from("<IBIII", data, pos)
        pos += 17
        if version != DATA_VERSION:
            raise CheckpointError(f"unsupported dataset version {version}")
        variant = {v: k for k, v in REPR_TAGS.items()}.get(tag)
        if variant is None:
            raise CheckpointError(f"unknown repr tag {tag}")
        width = fdim + adim
        episodes = []
        for _ in range(n_eps):
            if pos + 4 > len(data):
                raise CheckpointError("truncated dataset payload")
            (t,) = struct.unpack_from("<I", data, pos)
            pos += 4
            nbytes = 4 * t * width
            if pos + nbytes > len(data):
                raise CheckpointError("truncated dataset payload")
            episodes.append(np.frombuffer(data, "<f4", t * width, pos).reshape(t, width).astype(np.float32))
            pos += nbytes
        if pos + 8 * width != len(data):
            raise CheckpointError("dataset trailer size mismatch")
        mean = np.frombuffer(data, "<f4", width, pos).astype(np.float32)
        std = np.frombuffer(data, "<f4", width, pos + 4 * width).astype(np.float32)
        return cls(episodes, variant, fdim, adim, 0, mean, std)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        return cls.from_bytes(Path(path).read_bytes())


def rollout_expert(n: int, episode_len: int, seed: int, sim_cfg: SimConfig, cfg: ExpertConfig,
                   bank: TerrainBank | None = None):
    """Run ``n`` scripted expert episodes in one batch.

    Returns per-frame states (list of length ``episode_len + 1``), actions
    ``(episode_len, n, 5)`` and a fell mask.
    """
    bank = bank or TerrainBank([flat(sim_cfg.arena_half, sim_cfg.cell)])
    ss = np.random.SeedSequence(seed)
    script_seq, noise_seq = ss.spawn(2)
    rng = np.random.default_rng(script_seq)
    env_rngs = [np.random.default_rng(s) for s in noise_seq.spawn(n)]
    state = CharacterState.zeros(n, sim_cfg.body_offset)
    state.theta = rng.uniform(-np.pi, np.pi, n)
    state.z_body = bank.height(np.zeros(n, dtype=np.int64), state.p) + sim_cfg.body_offset
    script = ExpertScript(state, rng, sim_cfg, cfg)
    states, actions = [state], []
    fell = np.zeros(n, dtype=bool)
    tid = np.zeros(n, dtype=np.int64)
    for _ in range(episode_len):
        a = script.act(state)
        state, term = step(state, a, bank, tid, env_rngs, sim_cfg)
        fell |= term
        actions.append(a)
        states.append(state)
    return states, np.stack(actions), fell


def generate_dataset(n_episodes: int, episode_len: int, variant: str, seed: int,
                     sim_cfg: SimConfig | None = None, cfg: ExpertConfig | None = None,
                     batch: int = 500) -> TrajectoryDataset:
    """Expert episodes on flat ground; fallen episodes are discarded."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    sim_cfg = sim_cfg or SimConfig()
    cfg = cfg or ExpertConfig()
    fdim = repr_dim(variant)
    episodes, n_fell = [], 0
    seeds = np.random.SeedSequence(seed).spawn((n_episodes + batch - 1) // batch)
    done = 0
    for bseq in seeds:
        m = min(batch, n_episodes - done)
        states, actions, fell = rollout_expert(m, episode_len, int(bseq.generate_state(1)[0]), sim_cfg, cfg)
        n_fell += int(fell.sum())
        arr = np.stack([s.as_array() for s in states[:-1]], axis=1)  # (m, T, 13)
        for i in range(m):
            if fell[i]:
                continue
            traj = CharacterState.from_array(arr[i])
            feats = canonicalize(traj, variant, sim_cfg)
            episodes.append(np.concatenate([feats, actions[:, i]], axis=1).astype(np.float32))
        done += m
    if n_fell > cfg.max_fall_rate * n_episodes:
        raise GenerationError(f"expert fall rate {n_fell / n_episodes:.2%} exceeds {cfg.max_fall_rate:.0%}")
    if not episodes:
        raise GenerationError("every expert episode fell")
    return TrajectoryDataset(episodes, variant, fdim, ACTION_DIM, seed)
