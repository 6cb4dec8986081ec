"""Planar unicycle character with a balance pendulum and a two-link arm.

All state arrays carry a leading batch dimension; a single environment is a
batch of one. Integration is semi-implicit Euler at ``cfg.dt``.

Raw actions are ``(n, 5)`` arrays: body-frame drive acceleration (forward,
left), balance torque, and two arm PD target angles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .config import SimConfig
from .terrain import TerrainBank

ACTION_DIM = 5
DRIVE = slice(0, 2)
TORQUE = 2
QTARGET = slice(3, 5)


class SimulationError(RuntimeError):
    pass


@dataclass
class CharacterState:
    p: np.ndarray  # (n, 2) m
    theta: np.ndarray  # (n,) rad
    v: np.ndarray  # (n, 2) m/s
    omega: np.ndarray  # (n,) rad/s
    b: np.ndarray  # (n,) rad
    b_dot: np.ndarray  # (n,) rad/s
    q: np.ndarray  # (n, 2) rad
    q_dot: np.ndarray  # (n, 2) rad/s
    z_body: np.ndarray  # (n,) m

    def __len__(self):
        return len(self.theta)

    def copy(self) -> "CharacterState":
        return CharacterState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, idx) -> "CharacterState":
        idx = np.atleast_1d(idx)
        return CharacterState(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def put(self, idx, other: "CharacterState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    @classmethod
    def concat(cls, states) -> "CharacterState":
        return cls(**{f.name: np.concatenate([getattr(s, f.name) for s in states])
                      for f in fields(cls)})

    @classmethod
    def zeros(cls, n: int, body_offset: float = 0.9) -> "CharacterState":
        return cls(p=np.zeros((n, 2)), theta=np.zeros(n), v=np.zeros((n, 2)), omega=np.zeros(n),
                   b=np.zeros(n), b_dot=np.zeros(n), q=np.zeros((n, 2)), q_dot=np.zeros((n, 2)),
                   z_body=np.full(n, body_offset))

    def as_array(self) -> np.ndarray:
        """Flat ``(n, 13)``: p, theta, v, omega, b, b_dot, q, q_dot, z_body."""
        return np.concatenate([
            self.p, self.theta[:, None], self.v, self.omega[:, None], self.b[:, None],
            self.b_dot[:, None], self.q, self.q_dot, self.z_body[:, None]], axis=1)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "CharacterState":
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return cls(p=a[:, 0:2].copy(), theta=a[:, 2].copy(), v=a[:, 3:5].copy(),
                   omega=a[:, 5].copy(), b=a[:, 6].copy(), b_dot=a[:, 7].copy(),
                   q=a[:, 8:10].copy(), q_dot=a[:, 10:12].copy(), z_body=a[:, 12].copy())

    def all_finite(self) -> np.ndarray:
        return np.all(np.isfinite(self.as_array()), axis=1)


STATE_WIDTH = 13


def heading(theta) -> np.ndarray:
    theta = np.asarray(theta)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def clamp_action(action: np.ndarray, cfg: SimConfig) -> np.ndarray:
    a = np.array(action, dtype=np.float64, copy=True)
    a = np.atleast_2d(a)
    a[:, DRIVE] = np.clip(a[:, DRIVE], -cfg.a_max, cfg.a_max)
    a[:, TORQUE] = np.clip(a[:, TORQUE], -cfg.torque_max, cfg.torque_max)
    a[:, QTARGET] = np.clip(a[:, QTARGET], cfg.q_min, cfg.q_max)
    return a


def action_bounds(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([-cfg.a_max, -cfg.a_max, -cfg.torque_max, *cfg.q_min], dtype=np.float64)
    hi = np.array([cfg.a_max, cfg.a_max, cfg.torque_max, *cfg.q_max], dtype=np.float64)
    return lo, hi


def hand_position(state: CharacterState, cfg: SimConfig) -> np.ndarray:
    """World hand position ``(n, 3)``; the arm swings in the sagittal plane, q=0 hangs down.

    The shoulder sits ``shoulder_height`` above the ground under the body.
    """
    l0, l1 = cfg.arm_lengths
    q0, q1 = state.q[:, 0], state.q[:, 1]
    reach = l0 * np.sin(q0) + l1 * np.sin(q0 + q1)
    up = -l0 * np.cos(q0) - l1 * np.cos(q0 + q1)
    fwd = heading(state.theta)
    xy = state.p + fwd * reach[:, None]
    z = state.z_body - cfg.body_offset + cfg.shoulder_height + up
    return np.concatenate([xy, z[:, None]], axis=1)


def hand_velocity(state: CharacterState, cfg: SimConfig) -> np.ndarray:
    l0, l1 = cfg.arm_lengths
    q0, q1 = state.q[:, 0], state.q[:, 1]
    qd0, qd1 = state.q_dot[:, 0], state.q_dot[:, 1]
    reach = l0 * np.sin(q0) + l1 * np.sin(q0 + q1)
    reach_dot = l0 * np.cos(q0) * qd0 + l1 * np.cos(q0 + q1) * (qd0 + qd1)
    up_dot = l0 * np.sin(q0) * qd0 + l1 * np.sin(q0 + q1) * (qd0 + qd1)
    fwd = heading(state.theta)
    left = np.stack([-fwd[:, 1], fwd[:, 0]], axis=-1)
    xy = state.v + fwd * reach_dot[:, None] + left * (reach * state.omega)[:, None]
    return np.concatenate([xy, up_dot[:, None]], axis=1)


def outside_arena(p: np.ndarray, cfg: SimConfig) -> np.ndarray:
    return np.any(np.abs(p) > cfg.arena_half, axis=-1)


def step(state: CharacterState, action: np.ndarray, bank: TerrainBank, tid, rngs, cfg: SimConfig):
    """Advance every environment one control step.

    ``rngs`` holds one generator per environment (used only when ``cfg.noise``).
    Returns ``(next_state, terminated)``.
    """
    n = len(state)
    a = clamp_action(action, cfg)
    if a.shape != (n, ACTION_DIM):
        raise SimulationError(f"action batch shape {a.shape} != ({n}, {ACTION_DIM})")
    tid = np.broadcast_to(np.asarray(tid), (n,))
    dt = cfg.dt

    fwd = heading(state.theta)
    left = np.stack([-fwd[:, 1], fwd[:, 0]], axis=-1)
    acc = fwd * a[:, 0:1] + left * a[:, 1:2] - cfg.drag * state.v
    v = state.v + dt * acc

    v_f = np.sum(v * fwd, axis=1)
    v_l = np.sum(v * left, axis=1)
    speed = np.sqrt(v_f * v_f + v_l * v_l)
    err = np.arctan2(v_l, v_f)
    omega_dot = cfg.yaw_gain * np.minimum(speed, 1.0) * err - cfg.yaw_damping * state.omega
    omega = state.omega + dt * omega_dot
    theta = state.theta + dt * omega
    p = state.p + dt * v

    tau_q = cfg.kp * (a[:, QTARGET] - state.q) - cfg.kd * state.q_dot
    q_dot = state.q_dot + dt * tau_q
    q = state.q + dt * q_dot
    q_lo, q_hi = np.asarray(cfg.q_min), np.asarray(cfg.q_max)
    hit = (q < q_lo) | (q > q_hi)
    q = np.clip(q, q_lo, q_hi)
    q_dot = np.where(hit, 0.0, q_dot)

    slope_bias = cfg.slope_coef * np.sum(bank.gradient(tid, state.p) * state.v, axis=1)
    b_ddot = cfg.g_over_l * np.sin(state.b) - a[:, TORQUE] + slope_bias
    if cfg.noise:
        scale = cfg.base_noise + cfg.roughness_coef * bank.variance(tid, state.p)
        draws = np.array([rng.standard_normal() for rng in rngs])
        b_ddot = b_ddot + scale * draws
    b_dot = state.b_dot + dt * b_ddot
    b = state.b + dt * b_dot

    z_body = bank.height(tid, p) + cfg.body_offset
    nxt = CharacterState(p=p, theta=theta, v=v, omega=omega, b=b, b_dot=b_dot, q=q, q_dot=q_dot,
                         z_body=z_body)
    bad = ~nxt.all_finite()
    if np.any(bad):
        raise SimulationError(f"non-finite state after integration in envs {np.flatnonzero(bad).tolist()}")
    terminated = (np.abs(b) > cfg.b_max) | outside_arena(p, cfg)
    return nxt, terminated


def spawn(bank: TerrainBank, tid, p, theta, cfg: SimConfig) -> CharacterState:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n = len(p)
    s = CharacterState.zeros(n, cfg.body_offset)
    s.p = p.copy()
    s.theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), (n,)).copy()
    s.z_body = bank.height(np.broadcast_to(np.asarray(tid), (n,)), p) + cfg.body_offset
    return s


def kinetic_energy(state: CharacterState) -> np.ndarray:
    return 0.5 * np.sum(state.v * state.v, axis=1)


CSV_HEADER = ["frame", "px", "py", "theta", "vx", "vy", "omega", "b", "bdot", "q0", "q1",
              "hand_x", "hand_y", "hand_z", "terminated"]


def dump_trajectory_csv(path, states: list[CharacterState], terminated: list[bool], cfg: SimConfig,
                        env: int = 0) -> None:
    """One row per frame of environment ``env``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for frame, (s, term) in enumerate(zip(states, terminated)):
            hand = hand_position(s, cfg)[env]
            w.writerow([frame, s.p[env, 0], s.p[env, 1], s.theta[env], s.v[env, 0], s.v[env, 1],
                        s.omega[env], s.b[env], s.b_dot[env], s.q[env, 0], s.q[env, 1],
                        hand[0], hand[1], hand[2], int(bool(term))])
