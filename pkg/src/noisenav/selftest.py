"""Oracle suite: independent reference computations checked against the library."""

from __future__ import annotations

import math
import time

import numpy as np

from . import rewards as R
from .nav import bound_loss, clipped_surrogate, gae
from .nn import DenseNet
from .prior import LinearDenoiser, NoiseSchedule, ZeroDenoiser, ddim_denoise


def _brute_force_advantages(r, v, d, bootstrap, gamma, tau):
    """Advantage as the explicit (gamma*tau)-weighted sum of TD errors up to the first done."""
    n = len(r)
    vals = list(v) + [bootstrap]
    deltas = [r[t] + gamma * vals[t + 1] * (1 - d[t]) - vals[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, w = 0.0, 1.0
        for u in range(t, n):
            total += w * deltas[u]
            if d[u]:
                break
            w *= gamma * tau
        adv.append(total)
    return np.array(adv)


def _mc_advantages(r, v, d, bootstrap, gamma):
    """tau = 1: discounted reward-to-go (bootstrapped at the end) minus V."""
    n = len(r)
    out = []
    for t in range(n):
        g, w, u = 0.0, 1.0, t
        while u < n:
            g += w * r[u]
            if d[u]:
                break
            w *= gamma
            u += 1
        else:
            g += w * bootstrap
        out.append(g - v[t])
    return np.array(out)


def check_gae(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        r = rng.normal(size=10)
        v = rng.normal(size=10)
        d = (rng.uniform(size=10) < 0.2).astype(float)
        boot = float(rng.normal())
        gamma, tau = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0) or 0.5
        a, _ = gae(r, v, d, boot, gamma, tau)
        worst = max(worst, float(np.max(np.abs(a - _brute_force_advantages(r, v, d, boot, gamma, tau)))))
        a1, _ = gae(r, v, d, boot, gamma, 1.0)
        worst = max(worst, float(np.max(np.abs(a1 - _mc_advantages(r, v, d, boot, gamma)))))
    return worst


def check_ddim() -> float:
    sched = NoiseSchedule()
    ab = [math.prod(1.0 - (1e-4 + (2e-2 - 1e-4) * i / 49) for i in range(t + 1)) for t in range(50)]
    steps = [49, 39, 29, 19, 9]
    rng = np.random.default_rng(1)
    init = rng.normal(size=(3, 4, 3))
    hist = np.zeros((3, 6))
    worst = 0.0
    for a in (0.0, 0.3, -0.7):
        # scalar recursion: x -> x * c_j with eps = a * x
        scale = 1.0
        for j, t in enumerate(steps):
            x0_factor = (1.0 - math.sqrt(1.0 - ab[t]) * a) / math.sqrt(ab[t])
            if j + 1 < len(steps):
                tn = steps[j + 1]
                scale *= math.sqrt(ab[tn]) * x0_factor + math.sqrt(1.0 - ab[tn]) * a
            else:
                scale *= x0_factor
        stub = ZeroDenoiser(4, 3, 2) if a == 0.0 else LinearDenoiser(a, chunk_frames=4, d_x=3, history=2)
        out = ddim_denoise(stub, sched, init, hist)
        worst = max(worst, float(np.max(np.abs(out - scale * init))))
    # zero stub after a single step
    one = NoiseSchedule(ddim_steps=1)
    out = ddim_denoise(ZeroDenoiser(4, 3, 2), one, init, hist)
    worst = max(worst, float(np.max(np.abs(out - init / math.sqrt(ab[49])))))
    return worst


REWARD_CASES = [
    ("location d=0", lambda: R.reward_location([0, 0], [0, 0], 4.0), 1.0),
    ("location a1=4 d=0.5", lambda: R.reward_location([0.5, 0], [0, 0], 4.0), math.exp(-2)),
    ("location a1=2 d=1", lambda: R.reward_location([0, 1.0, 0], [0, 0, 0], 2.0), math.exp(-2)),
    ("orientation inside ball", lambda: R.reward_orientation([0.2, 0], [0, 0], [0, 1], 2.0), 1.0),
    ("orientation aligned", lambda: R.reward_orientation([2, 0], [0, 0], [1, 0], 2.0), 1.0),
    ("orientation perpendicular", lambda: R.reward_orientation([2, 0], [0, 0], [0, 1], 2.0), math.exp(-2)),
    ("stability far", lambda: R.reward_stability([7, 0], [0, 0], 3.0, 3.0, R.ReachParams()), 0.0),
    ("stability gated", lambda: R.reward_stability([0.5, 0], [0, 0], 0.5, 0.3, R.ReachParams()), 0.0),
    ("stability near", lambda: R.reward_stability([0.5, 0], [0, 0], 1.0, 1.0, R.ReachParams()), -0.4),
    ("reach at goal", lambda: R.reward_reach([0, 0], [0, 0], [1, 0], 0.0, 0.0, R.ReachParams()), 0.65),
    ("reach success frame", lambda: R.reward_reach([0, 0], [0, 0], [1, 0], 0.0, 0.0, R.ReachParams(), True),
     100.65),
    ("velocity perfect", lambda: R.reward_velocity([1, 0], [1, 0], [1, 0], [1, 0], R.VelocityParams()), 1.0),
    ("velocity perpendicular", lambda: R.reward_velocity([1, 0], [0, 1], [1, 0], [1, 0], R.VelocityParams()),
     (1 / 11) + (10 / 11) * 0.5),
    ("velocity error 2", lambda: R.reward_velocity([0, 0], [1, 0], [2, 0], [1, 0], R.VelocityParams()),
     math.exp(-1)),
    ("chunk k=4", lambda: R.chunk_reward([1, 1, 1, 1], 0.99), 3.940399),
    ("chunk gamma=1", lambda: R.chunk_reward([1, 2, 3], 1.0), 6.0),
]


def check_rewards() -> float:
    return max(abs(fn() - want) for _, fn, want in REWARD_CASES)


def _net_grad_error(sizes, rng) -> float:
    net = DenseNet.build(sizes, rng, dtype=np.float64)
    for layer in net.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
        if layer.norm:
            layer.gamma[:] = 1.0 + rng.normal(scale=0.1, size=layer.gamma.shape)
            layer.beta[:] = rng.normal(scale=0.1, size=layer.beta.shape)
    x = rng.normal(size=(3, sizes[0]))
    w = rng.normal(size=(3, sizes[-1]))
    net.forward(x)
    gx = net.backward(w)
    grads = net.grads
    eps = 1e-6
    worst = 0.0
    for p, g in zip(net.params() + [x], grads + [gx]):
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = float(np.sum(net.forward(x) * w))
            flat[i] = old - eps
            down = float(np.sum(net.forward(x) * w))
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(1e-3, abs(num) + abs(ana)))
    return worst


NET_SHAPES = [
    [13, 128, 128, 4],  # codec encoder
    [13, 128, 128, 5],  # codec decoder
    [356, 64, 64, 64, 272],  # denoiser (narrowed)
    [80, 64, 32, 16, 17],  # policy base
    [1027, 32, 16],  # terrain task MLP
    [4, 1],
]


def check_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    return max(_net_grad_error(s, rng) for s in NET_SHAPES)


def check_ppo() -> float:
    adv = np.array([0.5, -1.0, 2.0])
    e1 = abs(clipped_surrogate(np.ones(3), adv, 0.2) + adv.mean())
    e2 = abs(clipped_surrogate([1.5], [1.0], 0.2) + 1.2)
    return max(e1, e2)


def check_bound() -> float:
    return max(abs(bound_loss(np.full((4, 3), 0.5), 1.0)), abs(bound_loss(np.full((4, 3), 1.0), 1.0)),
               abs(bound_loss(np.full((4, 3), 1.5), 1.0) - 0.25), abs(bound_loss(np.full((2, 2), -1.5)) - 0.25))


CHECKS = [
    ("gae_brute_force", check_gae, 1e-10),
    ("ddim_closed_form", check_ddim, 1e-6),
    ("reward_examples", check_rewards, 1e-9),
    ("network_gradients", check_gradients, 1e-4),
    ("ppo_clip_cases", check_ppo, 0.0),
    ("bounding_loss", check_bound, 0.0),
]


def run_selftest(out=print) -> bool:
    t0 = time.perf_counter()
    ok = True
    for name, fn, tol in CHECKS:
        err = fn()
        passed = err <= tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}: max error {err:.3e} (tol {tol:g})")
    out(f"selftest finished in {time.perf_counter() - t0:.1f}s")
    return ok
