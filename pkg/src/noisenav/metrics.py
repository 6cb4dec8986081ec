"""Evaluation: success, jerk, velocity error, and NFE / compute-time accounting."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .envs import NavEnv
from .expert import Waypoint, expert_act
from .nn import ConfigError
from .prior import DenoiserModel, guided_sample_chunk
from .sim import heading

FRAME_RATE = 30.0
EPISODE_HEADER = ["episode", "success", "fell", "jerk", "vel_err", "frames", "nfe_fwd", "nfe_guid", "wall_ms"]


class MetricError(ValueError):
    pass


def jerk(positions, rate: float = FRAME_RATE) -> float:
    """Mean magnitude of the third derivative of a sampled trajectory.

    Central third differences on interior frames; with exactly four frames a
    single forward difference is used.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if len(p) < 4:
        raise MetricError("jerk needs at least 4 frames")
    if len(p) == 4:
        d3 = (p[3] - 3 * p[2] + 3 * p[1] - p[0])[None]
    else:
        d3 = (p[4:] - 2 * p[3:-1] + 2 * p[1:-3] - p[:-4]) / 2.0
    return float(np.mean(np.linalg.norm(d3, axis=1)) * rate ** 3)


def dataset_jerk(dataset) -> float:
    """Mean per-episode jerk of the expert root trajectories (planar positions)."""
    vals = [jerk(dataset.features(i)[:, 0:2]) for i in range(len(dataset.episodes))
            if len(dataset.episodes[i]) >= 4]
    return float(np.mean(vals))


@dataclass
class EpisodeMetrics:
    episode: int
    success: bool
    fell: bool
    jerk: float | None
    vel_err: float | None
    frames: int
    nfe_fwd: int
    nfe_guid: int
    wall_ms: float


@dataclass
class EvalReport:
    task: str
    episodes: list
    aggregate: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return self.aggregate["success_rate"]


def aggregate(task: str, eps: list[EpisodeMetrics], compute_s: float) -> dict:
    n = len(eps)
    jerks = [e.jerk for e in eps if e.jerk is not None]
    verr = [e.vel_err for e in eps if e.vel_err is not None]
    frames = sum(e.frames for e in eps)
    return {
        "task": task, "episodes": n,
        "success_rate": sum(e.success for e in eps) / n,
        "fall_rate": sum(e.fell for e in eps) / n,
        "jerk": float(np.mean(jerks)) if jerks else None,
        "vel_err": float(np.mean(verr)) if verr else None,
        "frames": frames,
        "nfe_fwd": sum(e.nfe_fwd for e in eps),
        "nfe_guid": sum(e.nfe_guid for e in eps),
        "compute_s": compute_s,
        "fps": frames / compute_s if compute_s > 0 else float("inf"),
    }


# --- agents that are not trained policies ----------------------------------------------------------

class ZeroAgent:
    """Emits zeros; used where the controller ignores the policy output."""

    def __init__(self, out_dim: int = 1):
        self.out_dim = out_dim

    def act(self, obs, rng=None, deterministic=True):
        n = len(obs)
        return np.zeros((n, self.out_dim)), np.zeros(n), np.zeros(n)


class ExpertController:
    """Scripted expert pursuing the task target directly (reference agent for evaluation)."""

    uses_history = False
    k = 1
    hist_dim = 0
    out_dim = 1

    def __init__(self, cfg: RunConfig, n: int, variant: str = "compact", far_speed: float = 1.5):
        self.sim_cfg, self.cfg = cfg.sim, cfg.expert
        self.variant = variant
        self.phase = np.zeros(n)
        self.far_speed = far_speed

    def reset(self, idx, env):
        self.phase[idx] = 0.0

    def features(self):
        return None

    def plan(self, omega, hist, env):
        return np.zeros((env.n, 1, 1))

    def action(self, env: NavEnv, _):
        s = env.state
        if env.task == "far_goal":
            wp = Waypoint(env.goal[:, :2], self.far_speed)
        elif env.task == "velocity":
            speed = np.linalg.norm(env.v_target, axis=1)
            dirn = np.where(speed[:, None] > 1e-9, env.v_target / np.maximum(speed, 1e-9)[:, None],
                            heading(s.theta))
            wp = Waypoint(s.p + 10.0 * dirn, speed)
        else:
            raise ConfigError("the scripted expert supports far_goal and velocity only")
        a = expert_act(s, wp, self.sim_cfg, self.cfg, self.phase)
        self.phase += np.linalg.norm(s.v, axis=1) * self.sim_cfg.dt * 2 * np.pi / self.cfg.stride
        return a

    def executed(self, env, u, active):
        pass


def guidance_loss(task: str, model: DenoiserModel, env: NavEnv, k: int):
    """Differentiable loss on normalized chunks for the loss-guided baseline.

    far_goal: squared distance of the k-th predicted position to a point at most
    1 m along the goal direction; velocity: squared error of predicted planar
    velocity over the executed frames. Returns ``loss_grad(x0) -> (loss, grad)``.
    """
    s = env.state
    fwd = heading(s.theta)
    right = np.stack([fwd[:, 1], -fwd[:, 0]], axis=1)

    def body(w):
        return np.stack([np.sum(w * right, axis=1), np.sum(w * fwd, axis=1)], axis=1)

    mean, std = model.mean, model.std
    if task == "far_goal":
        off = body(env.goal[:, :2] - s.p)
        d = np.linalg.norm(off, axis=1, keepdims=True)
        target = off * np.minimum(1.0, 1.0 / np.maximum(d, 1e-9))
        cols, frames = slice(0, 2), [k - 1]
    elif task == "velocity":
        target = body(env.v_target)
        cols, frames = slice(4, 6), list(range(k))
    else:
        raise ConfigError(f"no guidance loss for task {task!r}")

    def loss_grad(x0):
        grad = np.zeros_like(x0)
        total = np.zeros(len(x0))
        for j in frames:
            raw = x0[:, j, cols] * std[cols] + mean[cols]
            err = raw - target
            total += np.sum(err * err, axis=1)
            grad[:, j, cols] = 2.0 * err * std[cols] / len(frames)
        return total / len(frames), grad

    return loss_grad


class GuidedController:
    """Loss-guided denoising from Gaussian noise (the inference-time optimization baseline)."""

    uses_history = True

    def __init__(self, prior: DenoiserModel, codec, k: int, n: int, cfg: RunConfig, task: str,
                 guide_steps: int, guide_rate: float, seed: int = 0):
        from .prior import HistoryBuffer
        self.prior, self.codec, self.k, self.n, self.task = prior, codec, k, n, task
        self.sim_cfg = cfg.sim
        self.guide_steps, self.guide_rate = guide_steps, guide_rate
        self.history = HistoryBuffer.for_model(prior, n, cfg.sim)
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
        self.flagged = np.zeros(n, dtype=bool)
        self.out_dim = prior.d_x
        self.hist_dim = prior.history * prior.d_x
        self.variant = prior.repr

    def reset(self, idx, env):
        self.history.reset(idx, env.state.take(idx))
        self.flagged[idx] = False

    def features(self):
        return self.history.features()

    def plan(self, omega, hist, env):
        loss_grad = guidance_loss(self.task, self.prior, env, self.k)
        z, _, flagged = guided_sample_chunk(self.prior, self.prior.schedule, self.k, hist, loss_grad,
                                            self.guide_steps, self.guide_rate, self.rngs)
        self.flagged |= flagged
        return z

    def action(self, env, z_i):
        return self.codec.decode(env.prop(self.codec.repr), z_i, self.sim_cfg)

    def executed(self, env, z_i, active):
        self.history.push(env.state, z_i, active)


# --- evaluation loop ----------------------------------------------------------------------------

def evaluate(agent, ctrl_factory, cfg: RunConfig, task: str, n_episodes: int, seed: int,
             terrain: bool = False, eval_level: int | None = None, terrain_pool=None,
             deterministic: bool = True, batch: int = 200, prior: DenoiserModel | None = None) -> EvalReport:
    """Run ``n_episodes`` single-episode evaluations in batches.

    ``ctrl_factory(n)`` builds the controller; ``prior`` (when given) is the
    model whose NFE counters are attributed to episodes.
    """
    from .nav import observe
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    episodes: list[EpisodeMetrics] = []
    compute = 0.0
    ss = np.random.SeedSequence(seed)
    n_batches = (n_episodes + batch - 1) // batch
    for b, child in enumerate(ss.spawn(n_batches)):
        m = min(batch, n_episodes - b * batch)
        env_seed, act_seed = child.spawn(2)
        env = NavEnv(task, m, cfg, int(env_seed.generate_state(1)[0]), "eval", terrain,
                     terrain_pool=terrain_pool, eval_level=eval_level)
        ctrl = ctrl_factory(m)
        ctrl.reset(np.arange(m), env)
        rng = np.random.default_rng(act_seed)
        live = np.ones(m, dtype=bool)
        fell = np.zeros(m, dtype=bool)
        nfe_f = np.zeros(m, dtype=np.int64)
        nfe_g = np.zeros(m, dtype=np.int64)
        wall = np.zeros(m)
        traj = [[np.concatenate([env.state.p[i], env.state.z_body[i:i + 1]])] for i in range(m)]
        verr = [[] for _ in range(m)]
        transient = cfg.task.velocity_transient

        def on_frame(e, active):
            pos = np.concatenate([e.state.p, e.state.z_body[:, None]], axis=1)
            err = np.linalg.norm(e.state.v - e.v_target, axis=1)
            for i in np.flatnonzero(active):
                traj[i].append(pos[i])
                if task == "velocity" and e.frame[i] > transient:
                    verr[i].append(err[i])

        while live.any():
            f0 = prior.nfe.forward if prior is not None else 0
            g0 = prior.nfe.guidance if prior is not None else 0
            t0 = time.perf_counter()
            obs = observe(env, ctrl)
            omega, _, _ = agent.act(obs, rng, deterministic=deterministic)
            plan = ctrl.plan(omega, ctrl.features(), env)
            dt = time.perf_counter() - t0
            compute += dt
            n_live = int(live.sum())
            wall[live] += 1e3 * dt / n_live
            if prior is not None:
                nfe_f[live] += prior.nfe.forward - f0
                nfe_g[live] += prior.nfe.guidance - g0
            res = run_chunk_eval(env, ctrl, plan, live, on_frame)
            fell |= res.terminated & ~res.success
            live &= ~(res.terminated | res.truncated)
        for i in range(m):
            frames = int(env.frame[i])
            success = bool(env.success[i]) if task != "velocity" else \
                bool(not fell[i] and frames >= env.episode_frames)
            j = jerk(traj[i]) if (not fell[i] and len(traj[i]) >= 4) else None
            ve = float(np.mean(verr[i])) if verr[i] else None
            episodes.append(EpisodeMetrics(len(episodes), success, bool(fell[i]), j, ve, frames,
                                           int(nfe_f[i]), int(nfe_g[i]), float(wall[i])))
    return EvalReport(task, episodes, aggregate(task, episodes, compute))


def run_chunk_eval(env, ctrl, plan, live, on_frame):
    from .nav import run_chunk
    return run_chunk(env, ctrl, None, 1.0, live=live, on_frame=on_frame, plan=plan)


# --- reports -------------------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_report(report: EvalReport, out_dir, prefix: str = "eval", path_label: str | None = None,
                 include_wall: bool = True) -> tuple[Path, Path]:
    """Per-episode CSV plus a one-row aggregate CSV; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = (["path"] if path_label else []) + EPISODE_HEADER
    ep_path = out / f"{prefix}_episodes.csv"
    with open(ep_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e in report.episodes:
            row = [_fmt(v) for v in asdict(e).values()]
            if not include_wall:
                row[-1] = ""
            w.writerow(([path_label] if path_label else []) + row)
    agg_path = out / f"{prefix}_aggregate.csv"
    agg = dict(report.aggregate)
    if not include_wall:
        agg["compute_s"] = ""
        agg["fps"] = ""
    with open(agg_path, "w", newline="") as fh:
        w = csv.writer(fh)
        keys = (["path"] if path_label else []) + list(agg)
        w.writerow(keys)
        w.writerow(([path_label] if path_label else []) + [_fmt(agg[k]) for k in agg])
    return ep_path, agg_path


def compare_efficiency(nav_policy, prior: DenoiserModel, codec, cfg: RunConfig, task: str, k: int,
                       guide_steps: int, guide_rate: float, n_episodes: int, seed: int) -> dict:
    """Evaluate steering and loss-guided paths on the same frozen prior; returns both reports."""
    from .nav import NoiseController
    steer = evaluate(nav_policy, lambda n: NoiseController(prior, codec, k, n, cfg, seed=seed), cfg, task,
                     n_episodes, seed, prior=prior)
    guided = evaluate(ZeroAgent(prior.d_x),
                      lambda n: GuidedController(prior, codec, k, n, cfg, task, guide_steps, guide_rate, seed),
                      cfg, task, n_episodes, seed, prior=prior)
    return {"steering": steer, "guidance": guided}
