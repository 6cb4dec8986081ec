import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisenav.config import SimConfig
from noisenav.sim import (
    CSV_HEADER, CharacterState, SimulationError, action_bounds, clamp_action, dump_trajectory_csv,
    hand_position, kinetic_energy, spawn, step,
)
from noisenav.terrain import TerrainBank, flat

BANK = TerrainBank([flat()])


def _quiet():
    return SimConfig(noise=False)


def _rngs(n, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def test_equilibrium_is_fixed_point():
    cfg = _quiet()
    s = spawn(BANK, 0, [[1.0, 2.0]], 0.4, cfg)
    nxt, term = step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)
    assert not term[0]
    assert np.array_equal(nxt.as_array(), s.as_array())


def test_pendulum_is_unstable():
    cfg = _quiet()
    s = spawn(BANK, 0, [[0.0, 0.0]], 0.0, cfg)
    s.b[:] = 0.01
    bs = []
    # independent semi-implicit Euler integration of b'' = (g/L) sin b
    b, bd, ref = 0.01, 0.0, []
    for _ in range(30):
        s, _ = step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)
        bs.append(s.b[0])
        bd += cfg.dt * cfg.g_over_l * math.sin(b)
        b += cfg.dt * bd
        ref.append(b)
    assert all(y > x for x, y in zip(bs, bs[1:]))
    assert np.allclose(bs, ref, rtol=0, atol=1e-12)


def test_forced_termination():
    cfg = _quiet()
    s = spawn(BANK, 0, [[0.0, 0.0]], 0.0, cfg)
    s.b[:] = cfg.b_max + 0.1
    _, term = step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)
    assert term[0]


def test_leaving_arena_terminates():
    cfg = _quiet()
    s = spawn(BANK, 0, [[11.99, 0.0]], 0.0, cfg)
    s.v[:] = [3.0, 0.0]
    _, term = step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)
    assert term[0]


def test_nan_raises():
    cfg = _quiet()
    s = spawn(BANK, 0, [[0.0, 0.0]], 0.0, cfg)
    s.b_dot[:] = np.nan
    with pytest.raises(SimulationError):
        step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)


def test_batch_shape_mismatch():
    cfg = _quiet()
    s = spawn(BANK, 0, np.zeros((3, 2)), 0.0, cfg)
    with pytest.raises(SimulationError):
        step(s, np.zeros((2, 5)), BANK, 0, _rngs(3), cfg)


def test_actions_are_clamped():
    cfg = SimConfig()
    lo, hi = action_bounds(cfg)
    a = clamp_action(np.array([[100, -100, 1e6, -9, 9]]), cfg)[0]
    assert np.all(a >= lo) and np.all(a <= hi)


def _rollout(n, seed, steps, cfg, actions):
    s = spawn(BANK, 0, np.zeros((n, 2)), np.linspace(0, 1, n), cfg)
    rngs = _rngs(n, seed)
    for t in range(steps):
        s, _ = step(s, actions[t], BANK, 0, rngs, cfg)
    return s


def test_batch_equals_sequential():
    cfg = SimConfig()
    n, steps = 256, 5
    acts = np.random.default_rng(1).uniform(-1, 1, size=(steps, n, 5))
    batched = _rollout(n, 7, steps, cfg, acts)
    theta = np.linspace(0, 1, n)
    for i in range(n):
        s = spawn(BANK, 0, np.zeros((1, 2)), theta[i], cfg)
        rng = [np.random.default_rng([7, i])]
        for t in range(steps):
            s, _ = step(s, acts[t, i:i + 1], BANK, 0, rng, cfg)
        assert s.as_array().tobytes() == batched.take(i).as_array().tobytes()


def test_batch_of_one_equals_step():
    cfg = SimConfig()
    a = np.array([[1.0, 0.5, 0.2, 0.3, 0.1]])
    s = spawn(BANK, 0, [[0.0, 0.0]], 0.2, cfg)
    x, _ = step(s, a, BANK, 0, _rngs(1, 3), cfg)
    y, _ = step(s, a, BANK, 0, _rngs(1, 3), cfg)
    assert np.array_equal(x.as_array(), y.as_array())


def test_trajectory_deterministic():
    cfg = SimConfig()
    acts = np.random.default_rng(2).uniform(-1, 1, size=(20, 4, 5))
    a = _rollout(4, 5, 20, cfg, acts).as_array()
    b = _rollout(4, 5, 20, cfg, acts).as_array()
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(vx=st.floats(-3, 3), vy=st.floats(-3, 3), theta=st.floats(-3, 3), om=st.floats(-2, 2))
def test_energy_nonincreasing(vx, vy, theta, om):
    cfg = _quiet()
    s = spawn(BANK, 0, [[0.0, 0.0]], theta, cfg)
    s.v[:] = [vx, vy]
    s.omega[:] = om
    e = kinetic_energy(s)[0]
    for _ in range(60):
        s, _ = step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)
        e_new = kinetic_energy(s)[0]
        assert e_new <= e + 1e-12
        e = e_new


def test_body_stands_on_terrain():
    cfg = SimConfig()
    s = spawn(BANK, 0, [[0.5, -0.5]], 0.0, cfg)
    assert s.z_body[0] == pytest.approx(cfg.body_offset)


def test_hand_reach_band():
    cfg = SimConfig()
    s = CharacterState.zeros(3, cfg.body_offset)
    s.q[:] = [[0.0, 0.0], [math.pi / 2, 0.0], [3.0, 0.0]]
    z = hand_position(s, cfg)[:, 2]
    assert z[0] == pytest.approx(cfg.shoulder_height - 0.75)
    assert z[1] == pytest.approx(cfg.shoulder_height)
    assert z[2] > 2.0


def test_trajectory_csv(tmp_path):
    cfg = SimConfig()
    s = spawn(BANK, 0, [[0.0, 0.0]], 0.0, cfg)
    states, terms = [s], [False]
    for _ in range(3):
        s, t = step(s, np.zeros((1, 5)), BANK, 0, _rngs(1), cfg)
        states.append(s)
        terms.append(bool(t[0]))
    path = tmp_path / "traj.csv"
    dump_trajectory_csv(path, states, terms, cfg)
    rows = list(csv.reader(open(path)))
    assert rows[0] == CSV_HEADER
    assert len(rows) == 5
