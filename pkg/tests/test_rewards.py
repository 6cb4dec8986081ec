import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisenav import rewards as R
from noisenav.config import RewardConfig
from noisenav.selftest import REWARD_CASES

E2 = math.exp(-2)


@pytest.mark.parametrize("name,fn,want", REWARD_CASES, ids=[c[0] for c in REWARD_CASES])
def test_reward_examples(name, fn, want):
    assert abs(fn() - want) <= 1e-9


def test_hand_values():
    assert E2 == pytest.approx(0.135335, abs=1e-6)
    assert R.reward_velocity([0, 0], [0, 1], [0, 0], [1, 0], R.VelocityParams()) == pytest.approx(6 / 11)
    assert R.reward_velocity([3.0, 0], [1, 0], [1.0, 0], [1, 0], R.VelocityParams()) == pytest.approx(math.exp(-1))


def test_reach_degenerates_to_location():
    p = R.ReachParams(lambda1=0.0, lambda2=0.0)
    for d in (0.0, 0.7, 3.0, 8.0):
        got = R.reward_reach([d, 0], [0, 0], [0, 1], 2.0, 2.0, p)
        assert got == pytest.approx(R.reward_location([d, 0], [0, 0], p.alpha1))


def test_params_from_config():
    cfg = RewardConfig()
    far = R.ReachParams.far_goal(cfg)
    assert (far.alpha1, far.lambda1, far.lambda2, far.r_sparse) == (4.0, 0.05, 0.35, 100.0)
    assert R.ReachParams.far_goal(cfg, uneven=True).alpha1 == 2.0
    assert R.ReachParams.hand_reach(cfg).alpha1 == 2.0
    with pytest.raises(ValueError):
        R.ReachParams(lambda1=0.6, lambda2=0.5)
    with pytest.raises(ValueError):
        R.VelocityParams(alpha3=0.0)


def test_orientation_zero_offset():
    assert R.reward_orientation([0, 0], [0, 0], [1, 0], 2.0) == 1.0


@pytest.mark.parametrize("d,branch", [(0.3, "ball"), (1.2, "mid"), (6.0, "far"), (1.1999, "near")])
def test_branch_boundaries(d, branch):
    p = R.ReachParams()
    orient = R.reward_orientation([d, 0], [0, 0], [0, 1], p.alpha2)
    stab = R.reward_stability([d, 0], [0, 0], 1.0, 1.0, p)
    if branch == "ball":
        assert orient == 1.0
    else:
        assert orient == pytest.approx(E2)
    want = {"ball": -0.4, "near": -0.4, "mid": -0.2, "far": 0.0}[branch]
    assert stab == pytest.approx(want)


def test_success_predicate_windows():
    assert R.success_predicate("far_goal", [0.1] * 15)
    assert not R.success_predicate("far_goal", [0.1] * 14 + [0.5])
    assert R.success_predicate("hand_reach", [1.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 1.0])
    assert not R.success_predicate("hand_reach", [0.2] * 5)
    assert R.success_predicate("velocity", terminated=[False] * 200)
    assert not R.success_predicate("velocity", terminated=[False] * 150 + [True])


def test_sparse_bonus_fires_once():
    tr = R.SuccessTracker(1, 15)
    fired = [bool(tr.update(np.array([0.1]))[0]) for _ in range(60)]
    assert fired.count(True) == 1 and fired.index(True) == 14
    tr.reset([0])
    assert [bool(tr.update(np.array([0.1]))[0]) for _ in range(15)][-1]


def test_chunk_reward_cases():
    assert R.chunk_reward([2.5], 0.9) == 2.5
    with pytest.raises(ValueError):
        R.chunk_reward([], 0.9)
    with pytest.raises(ValueError):
        R.chunk_reward([1.0], 0.0)


finite = st.floats(-50, 50)


@settings(max_examples=200, deadline=None)
@given(gx=finite, gy=finite, px=finite, py=finite, heading=st.floats(-4, 4),
       v=st.floats(0, 10), w=st.floats(0, 10))
def test_dense_rewards_bounded(gx, gy, px, py, heading, v, w):
    p = R.ReachParams()
    fwd = [math.cos(heading), math.sin(heading)]
    loc = R.reward_location([gx, gy], [px, py], p.alpha1)
    ori = R.reward_orientation([gx, gy], [px, py], fwd, p.alpha2)
    assert 0.0 <= loc <= 1.0 and 0.0 < ori <= 1.0
    stab = R.reward_stability([gx, gy], [px, py], v, w, p)
    assert -p.beta1 * (p.c1 * v + p.c2 * w) - 1e-12 <= stab <= 0.0
    vel = R.reward_velocity([px / 10, py / 10], fwd, [gx / 10, gy / 10], [1.0, 0.0], R.VelocityParams())
    assert 0.0 <= vel <= 1.0 + 1e-12


@settings(max_examples=100, deadline=None)
@given(d1=st.floats(1.2, 5.99), d2=st.floats(1.2, 5.99), v=st.floats(0, 3), w=st.floats(0, 3))
def test_reach_monotone_within_branch(d1, d2, v, w):
    p = R.ReachParams()
    near, far = sorted((d1, d2))
    # goal straight ahead so orientation is constant
    r_near = R.reward_reach([0, near], [0, 0], [0, 1], v, w, p)
    r_far = R.reward_reach([0, far], [0, 0], [0, 1], v, w, p)
    assert r_far <= r_near + 1e-12


@settings(max_examples=100, deadline=None)
@given(rs=st.lists(st.floats(-10, 10), min_size=1, max_size=16), gamma=st.floats(0.01, 1.0))
def test_chunk_reward_matches_polynomial(rs, gamma):
    want = float(np.polyval(rs[::-1], gamma))
    assert R.chunk_reward(rs, gamma) == pytest.approx(want, rel=1e-9, abs=1e-9)
