"""PPO over the initial diffusion noise: policy, chunk-as-macro-step rollouts, losses, curriculum.

Each macro-step the policy emits one noise vector ``omega``. The frozen prior
denoises ``repeat(omega)`` into a chunk of latent actions, which are decoded
against the live simulator state and executed open-loop for ``k`` frames.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .codec import LatentCodec
from .config import PPOConfig, RunConfig
from .envs import NavEnv
from .nn import Adam, ConfigError, DenseNet, TrainingError, UsageError, checkpoint_load, \
    checkpoint_save, clip_grad_norm, silu, silu_grad
from .prior import DenoiserModel, HistoryBuffer, sample_chunk
from .sim import ACTION_DIM, action_bounds

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)
LOG_HEADER = ["epoch", "mean_reward", "success_rate", "clip_frac", "approx_kl", "mean_abs_mu", "level"]


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


class RunningNorm:
    """Running mean/variance (parallel-merge form) used to whiten observations and returns.

    The last ``passthrough`` columns keep mean 0 and variance 1. Height-map heights are already in metres
    and stay constant on flat ground, where whitening would turn the first centimetre of relief into
    clipped outliers.
    """

    def __init__(self, dim: int, clip: float = 10.0, passthrough: int = 0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.passthrough = passthrough

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, len(self.mean))
        bm, bv, bn = x.mean(axis=0), x.var(axis=0), len(x)
        delta = bm - self.mean
        tot = self.count + bn
        m2 = self.var * self.count + bv * bn + delta ** 2 * self.count * bn / tot
        # kept on the f32 grid so checkpoints restore the exact statistics
        self.mean = _f32(self.mean + delta * bn / tot)
        self.var = _f32(m2 / tot)
        self.count = float(np.float32(tot))
        if self.passthrough:
            self.mean[-self.passthrough:] = 0.0
            self.var[-self.passthrough:] = 1.0

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var + 1e-8)

    def __call__(self, x):
        return np.clip((np.asarray(x, dtype=np.float64) - self.mean) / self.std, -self.clip, self.clip)


class Branch:
    """Base MLP, optionally fed by a task MLP that encodes the trailing ``x[:, split:]`` columns."""

    def __init__(self, base: DenseNet, task: DenseNet | None = None, split: int | None = None):
        self.base, self.task, self.split = base, task, split
        self._pre = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float32)
        if self.task is None:
            return self.base.forward(x)
        pre = self.task.forward(x[:, self.split:])
        self._pre = pre
        h = np.concatenate([x[:, :self.split], silu(pre)], axis=1)
        return self.base.forward(h)

    def backward(self, g) -> list[np.ndarray]:
        gin = self.base.backward(g)
        grads = list(self.base.grads)
        if self.task is not None:
            self.task.backward(gin[:, self.split:] * silu_grad(self._pre))
            grads += self.task.grads
        return grads

    def params(self):
        return self.base.params() + (self.task.params() if self.task else [])

    def param_names(self, prefix):
        names = [f"{prefix}.base.{n}" for n in self.base.param_names()]
        if self.task:
            names += [f"{prefix}.task.{n}" for n in self.task.param_names()]
        return names


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    """Exact diagonal-Gaussian log density, summed over the last axis."""
    x, mean = np.asarray(x, dtype=np.float64), np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    z = (x - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


@dataclass
class ObsLayout:
    prop: int
    hist: int
    task: int
    heightmap: int = 0

    @property
    def total(self) -> int:
        return self.prop + self.hist + self.task + self.heightmap

    @property
    def split(self) -> int:
        """Columns before the task block (base-only inputs)."""
        return self.prop + self.hist


class NoisePolicy:
    """Gaussian actor over the noise vector plus a separate critic.

    In terrain mode each of actor and critic owns a task MLP over
    (task features, heightmap); the base MLP sees proprioception and history.
    """

    def __init__(self, layout: ObsLayout, out_dim: int, base_hidden, task_hidden, terrain: bool,
                 rng: np.random.Generator, log_std_init: float = 0.0):
        self.layout, self.out_dim, self.terrain = layout, out_dim, terrain
        self.base_hidden, self.task_hidden = list(base_hidden), list(task_hidden)
        self.actor = self._branch(rng, out_dim, 0.01)
        self.critic = self._branch(rng, 1, 1.0)
        self.log_std = np.full(out_dim, float(log_std_init), dtype=np.float32)
        self.obs_norm = RunningNorm(layout.total, passthrough=layout.heightmap)
        self.ret_norm = RunningNorm(1)
        self.meta: dict = {}

    def _branch(self, rng, out, scale):
        lay = self.layout
        if not self.terrain:
            return Branch(DenseNet.build([lay.total, *self.base_hidden, out], rng, out_scale=scale))
        task = DenseNet.build([lay.task + lay.heightmap, *self.task_hidden], rng)
        base = DenseNet.build([lay.split + self.task_hidden[-1], *self.base_hidden, out], rng, out_scale=scale)
        return Branch(base, task, lay.split)

    def _check(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[1] != self.layout.total:
            raise UsageError(f"observation dim {obs.shape[1]} != policy input dim {self.layout.total}")
        return obs

    @property
    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std.astype(np.float64), LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs) -> np.ndarray:
        return self.actor.forward(self.obs_norm(self._check(obs))).astype(np.float64)

    def value(self, obs) -> np.ndarray:
        v = self.critic.forward(self.obs_norm(self._check(obs))).astype(np.float64)[:, 0]
        return v * self.ret_norm.std[0] + self.ret_norm.mean[0]

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Returns ``(omega, log_prob, value)``; deterministic mode returns the mean."""
        obs = self._check(obs)
        mu = self.mean(obs)
        log_std = self.clamped_log_std
        if deterministic:
            omega = mu.copy()
        else:
            omega = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        return omega, gaussian_log_prob(omega, mu, log_std), self.value(obs)

    # -- persistence -----------------------------------------------------------------------------
    def save(self, path) -> None:
        lay = self.layout
        meta = {"kind": "policy", "obs_prop": lay.prop, "obs_hist": lay.hist, "obs_task": lay.task,
                "obs_heightmap": lay.heightmap, "out_dim": self.out_dim, "terrain": self.terrain,
                "base_hidden": self.base_hidden, "task_hidden": self.task_hidden, **self.meta}
        nets = {"critic": self.critic.base}
        if self.terrain:
            nets["actor_task"] = self.actor.task
            nets["critic_task"] = self.critic.task
        arrays = {"log_std": self.log_std, "obs_mean": self.obs_norm.mean, "obs_var": self.obs_norm.var,
                  "obs_count": np.array([self.obs_norm.count]), "ret_mean": self.ret_norm.mean,
                  "ret_var": self.ret_norm.var, "ret_count": np.array([self.ret_norm.count])}
        checkpoint_save(self.actor.base, path, meta=meta, nets=nets, arrays=arrays)

    @classmethod
    def load(cls, path) -> "NoisePolicy":
        actor, meta, nets, arrays = checkpoint_load(path, with_extension=True)
        if meta.get("kind") != "policy":
            raise ConfigError(f"{path} is not a policy checkpoint")
        lay = ObsLayout(meta["obs_prop"], meta["obs_hist"], meta["obs_task"], meta["obs_heightmap"])
        pol = cls.__new__(cls)
        pol.layout, pol.out_dim, pol.terrain = lay, meta["out_dim"], meta["terrain"]
        pol.base_hidden, pol.task_hidden = meta["base_hidden"], meta["task_hidden"]
        pol.actor = Branch(actor, nets.get("actor_task"), lay.split if pol.terrain else None)
        pol.critic = Branch(nets["critic"], nets.get("critic_task"), lay.split if pol.terrain else None)
        pol.log_std = arrays["log_std"].astype(np.float32)
        pol.obs_norm = RunningNorm(lay.total, passthrough=lay.heightmap)
        pol.obs_norm.mean = arrays["obs_mean"].astype(np.float64)
        pol.obs_norm.var = arrays["obs_var"].astype(np.float64)
        pol.obs_norm.count = float(arrays["obs_count"][0])
        pol.ret_norm = RunningNorm(1)
        pol.ret_norm.mean = arrays["ret_mean"].astype(np.float64)
        pol.ret_norm.var = arrays["ret_var"].astype(np.float64)
        pol.ret_norm.count = float(arrays["ret_count"][0])
        pol.meta = {k: v for k, v in meta.items() if k not in (
            "kind", "obs_prop", "obs_hist", "obs_task", "obs_heightmap", "out_dim", "terrain", "base_hidden", "task_hidden")}
        return pol


class RandomNoise:
    """Baseline agent: omega drawn from the standard Gaussian, i.e. plain prior sampling."""

    def __init__(self, out_dim: int):
        self.out_dim = out_dim

    def act(self, obs, rng, deterministic=False):
        n = len(obs)
        omega = rng.standard_normal((n, self.out_dim))
        return omega, gaussian_log_prob(omega, 0.0, np.zeros(self.out_dim)), np.zeros(n)


# --- advantage estimation and losses ---------------------------------------------------------

def gae(rewards, values, dones, bootstrap, gamma, tau):
    """Generalized advantage estimation over a time-major batch.

    ``gamma`` may be a scalar or an array shaped like ``rewards`` (per-step discount).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), r.shape)
    if np.any(g <= 0) or np.any(g > 1) or not 0 < tau <= 1:
        raise ConfigError("gamma and tau must lie in (0, 1]")
    adv = np.zeros_like(r)
    nxt_v = np.asarray(bootstrap, dtype=np.float64)
    nxt_a = np.zeros_like(r[0])
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + g[t] * nxt_v * live - v[t]
        nxt_a = delta + g[t] * tau * live * nxt_a
        adv[t] = nxt_a
        nxt_v = v[t]
    return adv, adv + v


def clipped_surrogate(ratio, adv, eps: float) -> float:
    ratio, adv = np.asarray(ratio, dtype=np.float64), np.asarray(adv, dtype=np.float64)
    return float(-np.mean(np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)))


def bound_loss(mu, threshold: float = 1.0) -> float:
    excess = np.maximum(0.0, np.abs(np.asarray(mu, dtype=np.float64)) - threshold)
    return float(np.mean(excess * excess))


@dataclass
class Batch:
    obs: np.ndarray
    omega: np.ndarray
    log_prob: np.ndarray
    adv: np.ndarray
    returns: np.ndarray

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.omega[idx], self.log_prob[idx], self.adv[idx], self.returns[idx])


def ppo_loss(policy: NoisePolicy, batch: Batch, cfg: PPOConfig, with_grad: bool = False):
    """Total loss ``L_clip + b1 L_vf + b2 L_b`` with diagnostics.

    With ``with_grad`` also returns ``(actor_grads, log_std_grad, critic_grads)``.
    Values are fitted in return-normalized units.
    """
    x = policy.obs_norm(batch.obs)
    b = len(x)
    mu = policy.actor.forward(x).astype(np.float64)
    log_std = policy.clamped_log_std
    std = np.exp(log_std)
    logp = gaussian_log_prob(batch.omega, mu, log_std)
    log_ratio = logp - batch.log_prob
    ratio = np.exp(log_ratio)
    adv = batch.adv
    eps = cfg.clip_eps
    l_clip = clipped_surrogate(ratio, adv, eps)
    v_n = policy.critic.forward(x).astype(np.float64)[:, 0]
    ret_n = (batch.returns - policy.ret_norm.mean[0]) / policy.ret_norm.std[0]
    l_vf = float(np.mean((v_n - ret_n) ** 2))
    l_b = bound_loss(mu, cfg.bound_threshold)
    loss = l_clip + cfg.b1 * l_vf + cfg.b2 * l_b
    diag = {"l_clip": l_clip, "l_vf": l_vf, "l_b": l_b,
            "clip_frac": float(np.mean(np.abs(ratio - 1.0) > eps)),
            "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
            "mean_abs_mu": float(np.mean(np.abs(mu))), "max_ratio_err": float(np.max(np.abs(log_ratio)))}
    if not with_grad:
        return loss, diag
    unclipped = np.where(adv >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)
    g_logp = np.where(unclipped, -adv * ratio / b, 0.0)
    diff = batch.omega - mu
    g_mu = g_logp[:, None] * diff / std ** 2
    excess = np.maximum(0.0, np.abs(mu) - cfg.bound_threshold)
    g_mu += cfg.b2 * 2.0 * excess * np.sign(mu) / mu.size
    g_log_std = np.sum(g_logp[:, None] * (diff ** 2 / std ** 2 - 1.0), axis=0)
    g_log_std = np.where((policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX), g_log_std, 0.0)
    actor_grads = policy.actor.backward(g_mu)
    g_v = cfg.b1 * 2.0 * (v_n - ret_n) / b
    critic_grads = policy.critic.backward(g_v[:, None])
    return loss, diag, (actor_grads, g_log_std, critic_grads)


# --- controllers: how omega becomes per-frame raw actions -------------------------------------

class NoiseController:
    """Noise steering through the frozen prior and decoder, with one history buffer per env."""

    uses_history = True

    def __init__(self, prior: DenoiserModel, codec: LatentCodec, k: int, n: int, cfg: RunConfig,
                 action_only: bool = False, seed: int = 0):
        if prior.repr != codec.repr or prior.z_dim != codec.z_dim:
            raise ConfigError("prior and codec disagree on representation or latent size")
        if not 1 <= k <= prior.chunk_frames:
            raise ConfigError(f"chunk size k={k} outside 1..{prior.chunk_frames}")
        self.prior, self.codec, self.k, self.n = prior, codec, k, n
        self.sim_cfg = cfg.sim
        self.action_only = action_only
        self.history = HistoryBuffer.for_model(prior, n, cfg.sim)
        self.noise_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]

    @property
    def out_dim(self) -> int:
        return self.prior.z_dim if self.action_only else self.prior.d_x

    @property
    def hist_dim(self) -> int:
        return self.prior.history * self.prior.d_x

    @property
    def variant(self) -> str:
        return self.prior.repr

    def reset(self, idx, env: NavEnv) -> None:
        self.history.reset(idx, env.state.take(idx))

    def features(self) -> np.ndarray:
        return self.history.features()

    def plan(self, omega: np.ndarray, hist: np.ndarray, env: NavEnv) -> np.ndarray:
        z, _ = sample_chunk(self.prior, self.prior.schedule, omega, self.k, hist, self.action_only,
                            self.noise_rngs)
        return z

    def action(self, env: NavEnv, z_i: np.ndarray) -> np.ndarray:
        return self.codec.decode(env.prop(self.codec.repr), z_i, self.sim_cfg)

    def executed(self, env: NavEnv, z_i: np.ndarray, active: np.ndarray) -> None:
        self.history.push(env.state, z_i, active)


class RawController:
    """Direct PPO over raw actions (one frame per decision), for the naturalness comparison.

    The policy output is an action in units of the expert action statistics.
    """

    uses_history = False
    k = 1

    def __init__(self, action_mean, action_std, cfg: RunConfig, variant: str = "compact"):
        self.mean = np.asarray(action_mean, dtype=np.float64)
        self.std = np.asarray(action_std, dtype=np.float64)
        self.sim_cfg = cfg.sim
        self.variant = variant
        self.out_dim = ACTION_DIM
        self.hist_dim = 0

    def reset(self, idx, env) -> None:
        pass

    def features(self):
        return None

    def plan(self, omega, hist, env):
        return np.asarray(omega, dtype=np.float64)[:, None, :]

    def action(self, env, u):
        lo, hi = action_bounds(self.sim_cfg)
        return np.clip(self.mean + self.std * u, lo, hi)

    def executed(self, env, u, active) -> None:
        pass


def observe(env: NavEnv, ctrl) -> np.ndarray:
    parts = [env.prop(ctrl.variant)]
    if ctrl.uses_history:
        parts.append(ctrl.features())
    parts.append(env.task_features())
    if env.terrain:
        parts.append(env.heightmap())
    return np.concatenate(parts, axis=1)


def obs_layout(env: NavEnv, ctrl) -> ObsLayout:
    from .expert import local_dim
    return ObsLayout(local_dim(ctrl.variant), ctrl.hist_dim, env.task_dim, env.heightmap_dim)


@dataclass
class ChunkResult:
    reward: np.ndarray  # discounted chunk reward
    discount: np.ndarray  # gamma ** frames executed
    frames: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    success: np.ndarray
    frame_rewards: list = field(default_factory=list)


def run_chunk(env: NavEnv, ctrl, omega: np.ndarray, gamma: float, live=None, on_frame=None,
              plan=None) -> ChunkResult:
    """Execute one macro-step for every live environment; envs that finish freeze for the rest of the chunk."""
    n = env.n
    if plan is None:
        plan = ctrl.plan(omega, ctrl.features(), env)
    active = np.ones(n, dtype=bool) if live is None else np.asarray(live, dtype=bool).copy()
    total, disc = np.zeros(n), np.ones(n)
    frames = np.zeros(n, dtype=np.int64)
    term = np.zeros(n, dtype=bool)
    trunc = np.zeros(n, dtype=bool)
    succ = np.zeros(n, dtype=bool)
    rewards = []
    for i in range(plan.shape[1]):
        a = ctrl.action(env, plan[:, i])
        r, te, tr, ev = env.step(a, active)
        total += np.where(active, disc * r, 0.0)
        disc = np.where(active, disc * gamma, disc)
        frames += active
        rewards.append(r)
        ctrl.executed(env, plan[:, i], active)
        if on_frame is not None:
            on_frame(env, active)
        term |= te
        trunc |= tr
        succ |= ev
        active &= ~(te | tr)
        if not active.any():
            break
    return ChunkResult(total, disc, frames, term, trunc, succ, rewards)


# --- curriculum --------------------------------------------------------------------------------

@dataclass
class CurriculumState:
    thresholds: list = field(default_factory=lambda: [50.0, 100.0])
    n_levels: int = 5
    goal_scales: list = field(default_factory=lambda: [0.5, 0.75, 1.0])
    tier: int = 0
    events: list = field(default_factory=list)  # (epoch, tier, mean_reward)

    def __post_init__(self):
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("curriculum thresholds must be ascending")

    @property
    def levels(self) -> tuple:
        if self.tier == 0:
            return (0,)
        if self.tier == 1:
            return (0, 1)
        return tuple(range(self.n_levels))

    @property
    def goal_scale(self) -> float:
        return self.goal_scales[min(self.tier, len(self.goal_scales) - 1)]

    @property
    def level(self) -> int:
        return max(self.levels)


def curriculum_update(cur: CurriculumState, mean_reward: float, epoch: int = -1) -> CurriculumState:
    """Monotone unlock: above the first threshold adds level 1; above the second unlocks all."""
    if not np.isfinite(mean_reward):
        return cur
    tier = cur.tier
    for i, th in enumerate(cur.thresholds):
        if mean_reward > th:
            tier = max(tier, i + 1)
    if tier > cur.tier:
        for t in range(cur.tier + 1, tier + 1):
            cur.events.append((epoch, t, float(mean_reward)))
        cur.tier = tier
    return cur


# --- rollouts and training -----------------------------------------------------------------------

@dataclass
class Rollout:
    obs: np.ndarray
    omega: np.ndarray
    log_prob: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    gammas: np.ndarray
    bootstrap: np.ndarray
    ep_returns: list
    ep_success: list
    frame_rewards: list


def collect_rollout(policy, env: NavEnv, ctrl, cfg: PPOConfig, rng: np.random.Generator) -> Rollout:
    h = cfg.horizon
    obs_l, om_l, lp_l, v_l, r_l, d_l, g_l, fr = [], [], [], [], [], [], [], []
    ep_ret, ep_succ = [], []
    for _ in range(h):
        obs = observe(env, ctrl)
        omega, logp, value = policy.act(obs, rng)
        res = run_chunk(env, ctrl, omega, cfg.gamma)
        reward = res.reward.copy()
        if res.truncated.any():
            boot = policy.value(observe(env, ctrl))
            reward += np.where(res.truncated, res.discount * boot, 0.0)
        done = res.terminated | res.truncated
        obs_l.append(obs)
        om_l.append(omega)
        lp_l.append(logp)
        v_l.append(value)
        r_l.append(reward)
        d_l.append(done)
        g_l.append(res.discount)
        fr.append(res)
        idx = np.flatnonzero(done)
        if len(idx):
            ep_ret += env.ep_return[idx].tolist()
            ep_succ += env.success[idx].tolist()
            env.reset(idx)
            ctrl.reset(idx, env)
    bootstrap = policy.value(observe(env, ctrl))
    return Rollout(np.stack(obs_l), np.stack(om_l), np.stack(lp_l), np.stack(v_l), np.stack(r_l),
                   np.stack(d_l), np.stack(g_l), bootstrap, ep_ret, ep_succ, fr)


def ppo_update(policy: NoisePolicy, ro: Rollout, cfg: PPOConfig, opts, rng: np.random.Generator):
    adv, ret = gae(ro.rewards, ro.values, ro.dones, ro.bootstrap, ro.gammas, cfg.gae_tau)
    n = adv.size
    flat = Batch(ro.obs.reshape(n, -1), ro.omega.reshape(n, -1), ro.log_prob.reshape(n),
                 adv.reshape(n), ret.reshape(n))
    policy.ret_norm.update(flat.returns[:, None])
    actor_opt, critic_opt = opts
    mb = min(cfg.minibatch_size, n)
    diags = []
    for _ in range(cfg.mini_epochs):
        a = flat.adv
        flat.adv = (a - a.mean()) / (a.std() + 1e-8)
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            batch = flat.take(perm[start:start + mb])
            loss, diag, (ga, gls, gc) = ppo_loss(policy, batch, cfg, with_grad=True)
            diags.append(diag)
            if not np.isfinite(loss):
                diag["aborted"] = True
                return diags
            actor_g = ga + [gls]
            clip_grad_norm(actor_g, cfg.max_grad_norm)
            clip_grad_norm(gc, cfg.max_grad_norm)
            actor_opt.step(actor_g)
            critic_opt.step(gc)
            np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
    return diags


def make_optimizers(policy: NoisePolicy, lr: float):
    actor = Adam(policy.actor.params() + [policy.log_std], lr=lr,
                 names=policy.actor.param_names("actor") + ["log_std"])
    critic = Adam(policy.critic.params(), lr=lr, names=policy.critic.param_names("critic"))
    return actor, critic


@dataclass
class TrainResult:
    policy: NoisePolicy
    log: list
    curriculum: CurriculumState | None


def build_policy(env: NavEnv, ctrl, cfg: RunConfig, rng) -> NoisePolicy:
    p = cfg.ppo
    return NoisePolicy(obs_layout(env, ctrl), ctrl.out_dim, p.base_hidden, p.task_hidden, env.terrain, rng,
                       p.log_std_init)


def train(cfg: RunConfig, task: str, ctrl_factory, terrain: bool = False, seed: int = 0, log=None,
          epochs: int | None = None, terrain_pool=None) -> TrainResult:
    """Alternate rollouts and PPO updates.

    ``ctrl_factory(n)`` builds the controller (noise steering or raw actions).
    """
    p = cfg.ppo
    if p.minibatch_size > p.n_envs * p.horizon:
        raise ConfigError("minibatch_size exceeds n_envs * horizon")
    ss = np.random.SeedSequence(seed)
    env_seed, pol_seq, act_seq, upd_seq = ss.spawn(4)
    env = NavEnv(task, p.n_envs, cfg, int(env_seed.generate_state(1)[0]), "train", terrain,
                 terrain_pool=terrain_pool)
    cur = None
    if terrain:
        c = cfg.curriculum
        cur = CurriculumState(list(c.thresholds), c.levels, list(c.goal_scale))
        env.set_curriculum(cur.levels, cur.goal_scale)
        env.reset(np.arange(env.n))
    ctrl = ctrl_factory(env.n)
    ctrl.reset(np.arange(env.n), env)
    policy = build_policy(env, ctrl, cfg, np.random.default_rng(pol_seq))
    policy.meta = {"task": task, "k": ctrl.k, "controller": type(ctrl).__name__, "repr": ctrl.variant,
                   "action_only": bool(getattr(ctrl, "action_only", False))}
    opts = make_optimizers(policy, p.lr)
    act_rng, upd_rng = np.random.default_rng(act_seq), np.random.default_rng(upd_seq)
    rows = []
    window = deque(maxlen=p.n_envs)
    for epoch in range(epochs if epochs is not None else p.epochs):
        ro = collect_rollout(policy, env, ctrl, p, act_rng)
        diags = ppo_update(policy, ro, p, opts, upd_rng)
        # whitening changes only after the update so stored log-probs stay exact
        policy.obs_norm.update(ro.obs.reshape(-1, ro.obs.shape[-1]))
        if any(d.get("aborted") for d in diags):
            if log:
                log(f"epoch {epoch}: non-finite loss, update aborted")
        mean_r = float(np.mean(ro.ep_returns)) if ro.ep_returns else float("nan")
        succ = float(np.mean(ro.ep_success)) if ro.ep_success else float("nan")
        if cur is not None:
            # a full window of recent episodes, so a few early quick successes cannot unlock levels
            window.extend(ro.ep_returns)
            if len(window) == window.maxlen:
                curriculum_update(cur, float(np.mean(window)), epoch)
                env.set_curriculum(cur.levels, cur.goal_scale)
        row = {"epoch": epoch, "mean_reward": mean_r, "success_rate": succ,
               "clip_frac": float(np.mean([d["clip_frac"] for d in diags])) if diags else 0.0,
               "approx_kl": float(np.mean([d["approx_kl"] for d in diags])) if diags else 0.0,
               "mean_abs_mu": float(np.mean([d["mean_abs_mu"] for d in diags])) if diags else 0.0,
               "level": cur.level if cur is not None else 0}
        rows.append(row)
        if log:
            log(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if not np.all(np.isfinite(policy.log_std)):
        raise TrainingError("policy log_std became non-finite")
    return TrainResult(policy, rows, cur)


def write_log(rows, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
