"""Run configuration: per-module dataclasses, named profiles, and the line-oriented text format.

The text format is one ``section.key = value`` per line with ``#`` comments.
Values are JSON literals (numbers, booleans, lists) or bare strings.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .nn import ConfigError


@dataclass
class SimConfig:
    dt: float = 1.0 / 30.0
    g_over_l: float = 9.0
    b_max: float = 0.8
    kp: float = 30.0
    kd: float = 2.0 * math.sqrt(30.0)
    drag: float = 0.5
    a_max: float = 5.0
    torque_max: float = 25.0
    q_min: list = field(default_factory=lambda: [-0.5, 0.0])
    q_max: list = field(default_factory=lambda: [3.0, 2.5])
    yaw_gain: float = 8.0
    yaw_damping: float = 6.0
    arm_lengths: list = field(default_factory=lambda: [0.4, 0.35])
    shoulder_height: float = 1.4
    body_offset: float = 0.9
    arena_half: float = 12.0
    cell: float = 0.125
    heightmap_n: int = 32
    slope_coef: float = 4.0
    roughness_coef: float = 60.0
    base_noise: float = 3.0
    noise: bool = True


@dataclass
class RewardConfig:
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
    alpha3: float = 0.25
    lambda_soften: float = 0.05
    hand_alpha1: float = 2.0
    uneven_alpha1: float = 2.0
    uneven_lambda1: float = 0.35
    uneven_lambda2: float = 0.35


@dataclass
class TaskConfig:
    far_goal_radius: float = 6.0
    far_goal_min: float = 1.0
    far_episode_frames: int = 300
    eval_goal_distance: float = 5.0
    eval_goal_sector_deg: float = 45.0
    hand_radius: float = 1.0
    hand_height_min: float = 0.7
    hand_height_max: float = 2.0
    hand_episode_frames: int = 270
    hand_target_period: int = 90
    velocity_max: float = 3.0
    velocity_episode_frames: int = 200
    velocity_transient: int = 90


@dataclass
class ExpertConfig:
    n_episodes: int = 2000
    episode_len: int = 300
    repr: str = "compact"
    kb: float = 30.0
    kbd: float = 8.0
    kv: float = 3.0
    kpos: float = 1.5
    speed_min: float = 0.3
    speed_max: float = 3.0
    swing_amp: float = 0.3
    stride: float = 1.2
    arm_rate: float = 2.0
    reach_prob: float = 0.5
    max_fall_rate: float = 0.2


@dataclass
class CodecConfig:
    z_dim: int = 4
    hidden: list = field(default_factory=lambda: [128, 128])
    epochs: int = 6
    batch: int = 512
    lr: float = 1e-3
    identity: bool = False


@dataclass
class PriorConfig:
    t_train: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 5
    chunk_frames: int = 16
    history: int = 4
    hidden: list = field(default_factory=lambda: [512, 512, 512])
    step_embed: int = 16
    epochs: int = 12
    batch: int = 256
    lr: float = 5e-4
    windows_per_epoch: int = 60000
    history_dropout: float = 0.1


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_tau: float = 0.95
    clip_eps: float = 0.2
    horizon: int = 32
    minibatch_size: int = 4096
    mini_epochs: int = 8
    lr: float = 2e-5
    b1: float = 5.0
    b2: float = 10.0
    bound_threshold: float = 1.0
    n_envs: int = 256
    base_hidden: list = field(default_factory=lambda: [2048, 1024, 512])
    task_hidden: list = field(default_factory=lambda: [512, 256])
    k: int = 8
    epochs: int = 1000
    action_only_noise: bool = False
    log_std_init: float = 0.0
    max_grad_norm: float = 1.0


@dataclass
class CurriculumConfig:
    thresholds: list = field(default_factory=lambda: [50.0, 100.0])
    levels: int = 5
    goal_scale: list = field(default_factory=lambda: [0.5, 0.75, 1.0])
    proportions: list = field(default_factory=lambda: [0.25, 0.15, 0.25, 0.25, 0.1])
    pool_per_cell: int = 2


@dataclass
class EvalConfig:
    n_episodes: int = 1000
    guide_steps: int = 10
    guide_rate: float = 0.05


SECTIONS = {
    "sim": SimConfig,
    "reward": RewardConfig,
    "task": TaskConfig,
    "expert": ExpertConfig,
    "codec": CodecConfig,
    "prior": PriorConfig,
    "ppo": PPOConfig,
    "curriculum": CurriculumConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    profile: str = "paper"
    seed: int = 0
    run_dir: str = "runs/default"
    sim: SimConfig = field(default_factory=SimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(ppo={"k": 4})``."""
        new = parse(emit(self))
        for name, overrides in sections.items():
            if name in SECTIONS:
                _set_fields(getattr(new, name), name, overrides)
            elif name in ("profile", "seed", "run_dir"):
                setattr(new, name, overrides)
            else:
                raise ConfigError(f"unknown section {name!r}")
        return new


def _set_fields(obj, section: str, values: dict) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(obj, key, value)


def paper_profile(seed: int = 0) -> RunConfig:
    return RunConfig(profile="paper", seed=seed)


def desk_profile(seed: int = 0) -> RunConfig:
    """Laptop-scale preset: widths divided by 4, fewer envs, larger constant learning rate."""
    cfg = RunConfig(profile="desk", seed=seed)
    cfg.ppo = PPOConfig(
        n_envs=64, minibatch_size=512, mini_epochs=4, lr=3e-4,
        base_hidden=[512, 256, 128], task_hidden=[128, 64], epochs=160,
    )
    cfg.expert = ExpertConfig(n_episodes=1000)
    cfg.codec = CodecConfig(epochs=4)
    cfg.eval = EvalConfig(n_episodes=200)
    return cfg


PROFILES = {"paper": paper_profile, "desk": desk_profile}


def make_profile(name: str, seed: int = 0) -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}")
    return PROFILES[name](seed)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, list)):
        return json.dumps(value)
    return str(value)


def _coerce(text: str, default):
    text = text.strip()
    if isinstance(default, str):
        return text
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse value {text!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {text!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, list) and isinstance(value, list):
        return value
    raise ConfigError(f"value {text!r} has the wrong type")


def emit(cfg: RunConfig) -> str:
    lines = [f"profile = {cfg.profile}", f"seed = {cfg.seed}", f"run_dir = {cfg.run_dir}"]
    for name in SECTIONS:
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{name}.{f.name} = {_fmt(getattr(getattr(cfg, name), f.name))}")
    return "\n".join(lines) + "\n"


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text on top of ``base`` (or on top of the profile named in the text)."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((lineno, key, value))
    if base is None:
        profile = next((v for _, k, v in entries if k == "profile"), "paper")
        base = make_profile(profile)
    cfg = dataclasses.replace(base)
    for name in SECTIONS:
        setattr(cfg, name, dataclasses.replace(getattr(base, name)))
    for lineno, key, value in entries:
        if key == "profile":
            cfg.profile = value
        elif key == "seed":
            cfg.seed = _coerce(value, 0)
        elif key == "run_dir":
            cfg.run_dir = value
        elif "." in key:
            section, fname = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            obj = getattr(cfg, section)
            if fname not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(obj, fname, _coerce(value, getattr(obj, fname)))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    p = cfg.ppo
    for name in ("gamma", "gae_tau", "clip_eps", "lr", "b1", "b2", "bound_threshold"):
        if getattr(p, name) <= 0:
            raise ConfigError(f"ppo.{name} must be positive")
    if p.horizon <= 0 or p.n_envs <= 0 or p.minibatch_size <= 0 or p.mini_epochs <= 0:
        raise ConfigError("ppo sizes must be positive")
    if p.minibatch_size > p.n_envs * p.horizon:
        raise ConfigError("ppo.minibatch_size exceeds n_envs * horizon")
    if not 1 <= p.k <= cfg.prior.chunk_frames:
        raise ConfigError(f"ppo.k={p.k} must be in 1..prior.chunk_frames={cfg.prior.chunk_frames}")
    r = cfg.reward
    if r.lambda1 + r.lambda2 >= 1 or r.uneven_lambda1 + r.uneven_lambda2 >= 1:
        raise ConfigError("reward lambda1 + lambda2 must be < 1")
    if cfg.expert.repr not in ("full", "compact", "root_only"):
        raise ConfigError(f"unknown repr {cfg.expert.repr!r}")
    th = cfg.curriculum.thresholds
    if list(th) != sorted(th):
        raise ConfigError("curriculum thresholds must be ascending")
    if cfg.profile not in PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}")


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(emit(cfg))
