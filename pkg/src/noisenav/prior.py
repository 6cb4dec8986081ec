"""History-conditioned diffusion prior over chunks of (state features, latent action) frames.

Chunks live in normalized space. The state part of each frame is expressed in
the frame of the current character state (the anchor). Frame ``j`` of a chunk
pairs the state reached after step ``j`` with the latent that produced it,
matching what the history buffer stores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import LatentCodec
from .config import PriorConfig, SimConfig
from .expert import TrajectoryDataset, reanchor, repr_dim, self_local, state_anchored
from .nn import Adam, ConfigError, DenseNet, TrainingError, UsageError, checkpoint_load, \
    checkpoint_save, clip_grad_norm
from .sim import CharacterState


class GuidanceError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    t_train: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 5

    def __post_init__(self):
        if not 1 <= self.ddim_steps <= self.t_train:
            raise ConfigError("ddim_steps must be in 1..t_train")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.t_train)
        self.alphas_bar = np.cumprod(1.0 - self.betas)
        stride = self.t_train // self.ddim_steps
        self.ddim_indices = [self.t_train - 1 - i * stride for i in range(self.ddim_steps)]

    @classmethod
    def from_config(cls, cfg: PriorConfig) -> "NoiseSchedule":
        return cls(cfg.t_train, cfg.beta_start, cfg.beta_end, cfg.ddim_steps)

    def with_steps(self, steps: int) -> "NoiseSchedule":
        return NoiseSchedule(self.t_train, self.beta_start, self.beta_end, steps)


def step_embedding(t, dim: int, t_max: int = 1000) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(t_max) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class NFECounter:
    forward: int = 0
    guidance: int = 0

    def reset(self):
        self.forward = 0
        self.guidance = 0


class DenoiserModel:
    """MLP noise predictor over (noisy chunk, flattened history, step embedding)."""

    def __init__(self, net: DenseNet, chunk_frames: int, history: int, d_x: int, step_embed: int,
                 variant: str, z_dim: int, mean: np.ndarray, std: np.ndarray,
                 schedule: NoiseSchedule):
        self.net = net
        self.chunk_frames, self.history, self.d_x = chunk_frames, history, d_x
        self.step_embed = step_embed
        self.repr, self.z_dim = variant, z_dim
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.schedule = schedule
        self.nfe = NFECounter()
        expect = chunk_frames * d_x + history * d_x + step_embed
        if net.input_dim != expect or net.output_dim != chunk_frames * d_x:
            raise ConfigError("denoiser net dimensions do not match the chunk layout")

    @property
    def state_dim(self) -> int:
        return self.d_x - self.z_dim

    def _inputs(self, x_t, history, t):
        b = x_t.shape[0]
        emb = step_embedding(np.broadcast_to(t, (b,)), self.step_embed)
        return np.concatenate([x_t.reshape(b, -1), history.reshape(b, -1), emb], axis=1)

    def eps(self, x_t: np.ndarray, history: np.ndarray, t) -> np.ndarray:
        self.nfe.forward += 1
        out = self.net.forward(self._inputs(x_t, history, t))
        return out.astype(np.float64).reshape(x_t.shape)

    def eps_with_vjp(self, x_t, history, t):
        """Noise prediction plus a function mapping d(loss)/d(eps) to d(loss)/d(x_t)."""
        out = self.net.forward(self._inputs(x_t, history, t)).astype(np.float64).reshape(x_t.shape)
        n_in = self.chunk_frames * self.d_x

        def vjp(g):
            gin = self.net.backward(g.reshape(g.shape[0], -1))
            return gin[:, :n_in].astype(np.float64).reshape(x_t.shape)

        return out, vjp

    def normalize(self, frames):
        return (np.asarray(frames, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, frames):
        return np.asarray(frames, dtype=np.float64) * self.std + self.mean

    def save(self, path) -> None:
        s = self.schedule
        meta = {"kind": "prior", "t_train": s.t_train, "beta_start": s.beta_start, "beta_end": s.beta_end,
                "ddim_steps": s.ddim_steps, "ddim_indices": s.ddim_indices,
                "chunk_frames": self.chunk_frames, "history": self.history, "d_x": self.d_x,
                "step_embed": self.step_embed, "repr": self.repr, "z_dim": self.z_dim}
        checkpoint_save(self.net, path, meta=meta, arrays={"mean": self.mean, "std": self.std})

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        net, meta, _, arrays = checkpoint_load(path, with_extension=True)
        if meta.get("kind") != "prior":
            raise ConfigError(f"{path} is not a prior checkpoint")
        sched = NoiseSchedule(meta["t_train"], meta["beta_start"], meta["beta_end"], meta["ddim_steps"])
        return cls(net, meta["chunk_frames"], meta["history"], meta["d_x"], meta["step_embed"],
                   meta["repr"], meta["z_dim"], arrays["mean"], arrays["std"], sched)


class ZeroDenoiser:
    """Test stub predicting zero noise."""

    def __init__(self, chunk_frames=4, d_x=3, history=2):
        self.chunk_frames, self.d_x, self.history = chunk_frames, d_x, history
        self.nfe = NFECounter()

    def eps(self, x_t, history, t):
        self.nfe.forward += 1
        return np.zeros_like(x_t)

    def eps_with_vjp(self, x_t, history, t):
        return np.zeros_like(x_t), lambda g: np.zeros_like(x_t)


class LinearDenoiser(ZeroDenoiser):
    """Test stub predicting ``eps = a * x_t`` (frame-independent)."""

    def __init__(self, a: float, **kw):
        super().__init__(**kw)
        self.a = a

    def eps(self, x_t, history, t):
        self.nfe.forward += 1
        return self.a * x_t

    def eps_with_vjp(self, x_t, history, t):
        return self.a * x_t, lambda g: self.a * g


def ddim_denoise(model, schedule: NoiseSchedule, init_noise: np.ndarray, history: np.ndarray) -> np.ndarray:
    """Deterministic DDIM (eta = 0) from ``init_noise`` ``(B, F, d_x)``; returns the final x0 estimate."""
    if history is None or not np.all(np.isfinite(history)):
        raise UsageError("history must be filled before denoising")
    x = np.asarray(init_noise, dtype=np.float64)
    ab = schedule.alphas_bar
    idx = schedule.ddim_indices
    x0 = x
    for j, t in enumerate(idx):
        eps = model.eps(x, history, t)
        x0 = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        if j + 1 < len(idx):
            tn = idx[j + 1]
            x = np.sqrt(ab[tn]) * x0 + np.sqrt(1.0 - ab[tn]) * eps
    return x0


def repeat_noise(omega: np.ndarray, chunk_frames: int) -> np.ndarray:
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    return np.repeat(omega[:, None, :], chunk_frames, axis=1)


def build_init_noise(omega, chunk_frames: int, state_dim: int = 0, action_only: bool = False,
                     rngs=None) -> np.ndarray:
    """Repeat the policy noise over the chunk; with ``action_only`` the state part is fresh Gaussian.

    In action-only mode ``omega`` carries only the latent-action components.
    """
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    if not action_only:
        return repeat_noise(omega, chunk_frames)
    b = omega.shape[0]
    state = np.stack([rng.standard_normal((chunk_frames, state_dim)) for rng in rngs])
    return np.concatenate([state, repeat_noise(omega, chunk_frames)], axis=2).reshape(b, chunk_frames, -1)


def sample_chunk(model, schedule: NoiseSchedule, omega, k: int, history: np.ndarray,
                 action_only: bool = False, rngs=None):
    """Denoise ``repeat(omega)`` and return ``(z, state_features)`` for the first ``k`` frames.

    Outputs are de-normalized: ``z`` is ``(B, k, z_dim)``, states ``(B, k, repr_dim)``.
    """
    if not 1 <= k <= model.chunk_frames:
        raise ConfigError(f"chunk size k={k} outside 1..{model.chunk_frames}")
    init = build_init_noise(omega, model.chunk_frames, model.d_x - model.z_dim, action_only, rngs)
    x0 = ddim_denoise(model, schedule, init, history)
    frames = model.denormalize(x0[:, :k])
    sd = model.d_x - model.z_dim
    return frames[..., sd:], frames[..., :sd]


def guided_denoise(model, schedule: NoiseSchedule, init_noise, history, loss_grad, guide_steps: int,
                   guide_rate: float):
    """DDIM with loss guidance: before each step, ``guide_steps`` descent updates on ``x_t``.

    ``loss_grad(x0)`` returns ``(loss, d loss / d x0)`` for normalized chunks; its
    gradient is pulled back through ``x0(x_t)``, so each inner update is one
    denoiser forward plus one backward. Returns ``(x0, flagged)``; non-finite
    gradients fall back to the unguided step and set ``flagged``.
    """
    if history is None or not np.all(np.isfinite(history)):
        raise UsageError("history must be filled before denoising")
    x = np.asarray(init_noise, dtype=np.float64)
    ab = schedule.alphas_bar
    idx = schedule.ddim_indices
    flagged = np.zeros(x.shape[0], dtype=bool)
    x0 = x
    for j, t in enumerate(idx):
        sa, sb = np.sqrt(ab[t]), np.sqrt(1.0 - ab[t])
        for _ in range(guide_steps):
            model.nfe.guidance += 1
            eps, vjp = model.eps_with_vjp(x, history, t)
            x0_hat = (x - sb * eps) / sa
            _, g0 = loss_grad(x0_hat)
            g_x = (g0 - sb * vjp(g0)) / sa
            ok = np.all(np.isfinite(g_x.reshape(len(x), -1)), axis=1)
            flagged |= ~ok
            x = np.where(ok[:, None, None], x - guide_rate * np.nan_to_num(g_x), x)
        eps = model.eps(x, history, t)
        x0 = (x - sb * eps) / sa
        if j + 1 < len(idx):
            tn = idx[j + 1]
            x = np.sqrt(ab[tn]) * x0 + np.sqrt(1.0 - ab[tn]) * eps
    return x0, flagged


def guided_sample_chunk(model, schedule, k: int, history, loss_grad, guide_steps: int, guide_rate: float,
                        rngs):
    """Guided counterpart of :func:`sample_chunk` starting from Gaussian noise drawn per environment."""
    if not 1 <= k <= model.chunk_frames:
        raise ConfigError(f"chunk size k={k} outside 1..{model.chunk_frames}")
    init = np.stack([rng.standard_normal((model.chunk_frames, model.d_x)) for rng in rngs])
    x0, flagged = guided_denoise(model, schedule, init, history, loss_grad, guide_steps, guide_rate)
    frames = model.denormalize(x0[:, :k])
    sd = model.d_x - model.z_dim
    return frames[..., sd:], frames[..., :sd], flagged


# --- history -----------------------------------------------------------------------------

class HistoryBuffer:
    """Last ``h`` executed (state, latent) pairs for a batch of environments.

    States are kept raw and re-anchored to the newest state on every read, so
    the conditioning is always expressed in the current character frame.
    Missing entries read as the dataset-mean frame (zero in normalized units).
    """

    def __init__(self, n: int, h: int, variant: str, z_dim: int, mean, std, sim_cfg: SimConfig):
        self.n, self.h, self.repr, self.z_dim = n, h, variant, z_dim
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.sim_cfg = sim_cfg
        self.d_x = repr_dim(variant) + z_dim
        self.states = np.zeros((n, h, 13))
        self.z = np.zeros((n, h, z_dim))
        self.count = np.zeros(n, dtype=np.int64)
        self.anchor = CharacterState.zeros(n, sim_cfg.body_offset)

    @classmethod
    def for_model(cls, model: DenoiserModel, n: int, sim_cfg: SimConfig) -> "HistoryBuffer":
        return cls(n, model.history, model.repr, model.z_dim, model.mean, model.std, sim_cfg)

    def reset(self, idx, anchor: CharacterState) -> None:
        idx = np.atleast_1d(idx)
        self.count[idx] = 0
        self.states[idx] = 0.0
        self.z[idx] = 0.0
        self.anchor.put(idx, anchor)

    def push(self, state: CharacterState, z: np.ndarray, active=None) -> None:
        """Append ``(state, z)`` for every environment where ``active`` is true."""
        active = np.ones(self.n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            return
        self.states[idx, :-1] = self.states[idx, 1:]
        self.z[idx, :-1] = self.z[idx, 1:]
        self.states[idx, -1] = state.as_array()[idx]
        self.z[idx, -1] = np.asarray(z)[idx]
        self.count[idx] = np.minimum(self.count[idx] + 1, self.h)
        self.anchor.put(idx, state.take(idx))

    def frames(self) -> np.ndarray:
        """Normalized history frames ``(n, h, d_x)``, newest last, padded with zeros."""
        out = np.zeros((self.n, self.h, self.d_x))
        for j in range(self.h):
            real = self.count >= self.h - j
            if not np.any(real):
                continue
            idx = np.flatnonzero(real)
            st = CharacterState.from_array(self.states[idx, j])
            feats = state_anchored(st, self.anchor.take(idx), self.repr, self.sim_cfg)
            x = np.concatenate([feats, self.z[idx, j]], axis=1)
            out[idx, j] = (x - self.mean) / self.std
        return out

    def features(self) -> np.ndarray:
        return self.frames().reshape(self.n, -1)


# --- training ------------------------------------------------------------------------------

@dataclass
class WindowSampler:
    """Draws (history, chunk) training windows from a dataset with precomputed latents."""

    feats: np.ndarray  # (N, repr_dim) episode-canonical features, episodes concatenated
    z: np.ndarray  # (N, z_dim)
    starts: np.ndarray  # valid anchor indices into feats
    first: np.ndarray  # episode start index for each row
    h: int
    chunk: int
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    @classmethod
    def from_dataset(cls, dataset: TrajectoryDataset, codec: LatentCodec, h: int, chunk: int):
        feats, zs, starts, first = [], [], [], []
        offset = 0
        for i in range(len(dataset.episodes)):
            f = dataset.features(i)
            a = dataset.actions(i)
            z = codec.encode(self_local(f), a)
            t = len(f)
            feats.append(f)
            zs.append(z)
            if t > chunk:
                starts.append(offset + np.arange(0, t - chunk))
            first.append(np.full(t, offset))
            offset += t
        return cls(np.concatenate(feats), np.concatenate(zs), np.concatenate(starts),
                   np.concatenate(first), h, chunk)

    def raw(self, anchors: np.ndarray, drop=None):
        """Un-normalized ``(history, chunk, history_valid)`` for the given anchor rows."""
        f, z = self.feats, self.z
        anchor = f[anchors]
        j = np.arange(self.chunk)
        chunk_s = reanchor(f[anchors[:, None] + j + 1], anchor)
        chunk = np.concatenate([chunk_s, z[anchors[:, None] + j]], axis=2)
        m = np.arange(self.h, 0, -1)  # oldest first
        hs_idx = anchors[:, None] - m + 1
        hz_idx = anchors[:, None] - m
        valid = hz_idx >= self.first[anchors][:, None]
        hs = reanchor(f[np.maximum(hs_idx, 0)], anchor)
        hist = np.concatenate([hs, z[np.maximum(hz_idx, 0)]], axis=2)
        if drop is not None:
            valid &= np.arange(self.h)[None, :] >= drop[:, None]
        return hist, chunk, valid

    def fit_stats(self, rng: np.random.Generator, n: int = 20000) -> None:
        anchors = rng.choice(self.starts, size=min(n, len(self.starts)), replace=False)
        _, chunk, _ = self.raw(np.sort(anchors))
        flat = chunk.reshape(-1, chunk.shape[-1])
        self.mean = flat.mean(axis=0).astype(np.float32).astype(np.float64)
        self.std = np.maximum(flat.std(axis=0), 1e-3).astype(np.float32).astype(np.float64)

    def batch(self, rng: np.random.Generator, size: int, dropout: float):
        anchors = rng.choice(self.starts, size=size)
        drop = np.where(rng.uniform(size=size) < dropout, rng.integers(1, self.h + 1, size), 0)
        hist, chunk, valid = self.raw(anchors, drop)
        hist = np.where(valid[..., None], (hist - self.mean) / self.std, 0.0)
        return hist, (chunk - self.mean) / self.std


def build_denoiser(cfg: PriorConfig, variant: str, z_dim: int, mean, std, rng) -> DenoiserModel:
    d_x = repr_dim(variant) + z_dim
    f, h, e = cfg.chunk_frames, cfg.history, cfg.step_embed
    net = DenseNet.build([f * d_x + h * d_x + e, *cfg.hidden, f * d_x], rng)
    return DenoiserModel(net, f, h, d_x, e, variant, z_dim, mean, std, NoiseSchedule.from_config(cfg))


def diffusion_loss(model: DenoiserModel, x0: np.ndarray, hist: np.ndarray, t: np.ndarray,
                   noise: np.ndarray, backward: bool = False) -> float:
    """Mean over the batch of the per-sample squared noise-prediction error."""
    ab = model.schedule.alphas_bar[t][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    b = len(x0)
    emb = step_embedding(t, model.step_embed)
    inp = np.concatenate([x_t.reshape(b, -1), hist.reshape(b, -1), emb], axis=1)
    pred = model.net.forward(inp)
    diff = pred.astype(np.float64) - noise.reshape(b, -1)
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if backward:
        model.net.backward(2.0 * diff / (b * diff.shape[1]))
    return loss


def train_prior(dataset: TrajectoryDataset, codec: LatentCodec, cfg: PriorConfig, seed: int, log=None):
    """Fit the denoiser on sampled windows; returns ``(model, per-epoch mean losses)``."""
    if codec.repr != dataset.repr:
        raise ConfigError(f"codec repr {codec.repr!r} != dataset repr {dataset.repr!r}")
    rng = np.random.default_rng(seed)
    sampler = WindowSampler.from_dataset(dataset, codec, cfg.history, cfg.chunk_frames)
    sampler.fit_stats(rng)
    model = build_denoiser(cfg, dataset.repr, codec.z_dim, sampler.mean, sampler.std, rng)
    net = model.net
    opt = Adam(net.params(), lr=cfg.lr, names=net.param_names())
    t_train = model.schedule.t_train
    losses = []
    steps = max(1, cfg.windows_per_epoch // cfg.batch)
    total_steps = steps * cfg.epochs
    for epoch in range(cfg.epochs):
        total = 0.0
        for s in range(steps):
            hist, x0 = sampler.batch(rng, cfg.batch, cfg.history_dropout)
            t = rng.integers(0, t_train, cfg.batch)
            noise = rng.standard_normal(x0.shape)
            loss = diffusion_loss(model, x0, hist, t, noise, backward=True)
            if not np.isfinite(loss):
                raise TrainingError(f"prior loss is not finite at epoch {epoch}")
            total += loss
            grads = net.grads
            clip_grad_norm(grads, 1.0)
            # cosine decay to 10% of the base rate
            frac = (epoch * steps + s) / total_steps
            opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac)))
            opt.step(grads)
        losses.append(total / steps)
        if log:
            log(f"prior epoch {epoch}: loss {losses[-1]:.4f}")
    return model, losses
