"""State-conditioned latent action autoencoder; the decoder maps (state, z) back to raw actions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CodecConfig, SimConfig
from .expert import TrajectoryDataset, local_dim, self_local
from .nn import Adam, ConfigError, DenseNet, TrainingError, UsageError, checkpoint_load, \
    checkpoint_save, clip_grad_norm
from .sim import ACTION_DIM, action_bounds


@dataclass
class LatentCodec:
    encoder: DenseNet | None
    decoder: DenseNet | None
    z_dim: int
    repr: str
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    identity: bool = False
    train_rmse: np.ndarray | None = None

    @property
    def state_dim(self) -> int:
        return local_dim(self.repr)

    @classmethod
    def identity_codec(cls, variant: str = "compact") -> "LatentCodec":
        d = local_dim(variant)
        return cls(None, None, ACTION_DIM, variant, np.zeros(d), np.ones(d), np.zeros(ACTION_DIM),
                   np.ones(ACTION_DIM), identity=True)

    def _check(self, state_features, other, width, what):
        s = np.atleast_2d(np.asarray(state_features, dtype=np.float64))
        o = np.atleast_2d(np.asarray(other, dtype=np.float64))
        if s.shape[-1] != self.state_dim:
            raise UsageError(f"state feature dim {s.shape[-1]} != codec state dim {self.state_dim}")
        if o.shape[-1] != width:
            raise UsageError(f"{what} dim {o.shape[-1]} != {width}")
        return s, o

    def encode(self, state_features, action) -> np.ndarray:
        s, a = self._check(state_features, action, ACTION_DIM, "action")
        if self.identity:
            return a.copy()
        x = np.concatenate([(s - self.state_mean) / self.state_std,
                            (a - self.action_mean) / self.action_std], axis=-1)
        return self.encoder.forward(x).astype(np.float64)

    def decode_raw(self, state_features, z) -> np.ndarray:
        s, z = self._check(state_features, z, self.z_dim, "latent")
        if self.identity:
            return z.copy()
        x = np.concatenate([(s - self.state_mean) / self.state_std, z], axis=-1)
        return self.decoder.forward(x).astype(np.float64) * self.action_std + self.action_mean

    def decode(self, state_features, z, sim_cfg: SimConfig | None = None) -> np.ndarray:
        """Raw action for each row, clamped to the simulator's action bounds."""
        lo, hi = action_bounds(sim_cfg or SimConfig())
        return np.clip(self.decode_raw(state_features, z), lo, hi)

    def save(self, path) -> None:
        meta = {"kind": "codec", "z_dim": self.z_dim, "identity": self.identity, "repr": self.repr}
        arrays = {"state_mean": self.state_mean, "state_std": self.state_std,
                  "action_mean": self.action_mean, "action_std": self.action_std}
        if self.train_rmse is not None:
            arrays["train_rmse"] = self.train_rmse
        if self.identity:
            stub = DenseNet.build([1, 1], np.random.default_rng(0))
            checkpoint_save(stub, path, meta=meta, arrays=arrays)
        else:
            checkpoint_save(self.decoder, path, meta=meta, nets={"encoder": self.encoder}, arrays=arrays)

    @classmethod
    def load(cls, path) -> "LatentCodec":
        dec, meta, nets, arrays = checkpoint_load(path, with_extension=True)
        if meta.get("kind") != "codec":
            raise ConfigError(f"{path} is not a codec checkpoint")
        f64 = {k: v.astype(np.float64) for k, v in arrays.items()}
        identity = bool(meta["identity"])
        return cls(None if identity else nets["encoder"], None if identity else dec, int(meta["z_dim"]),
                   meta["repr"], f64["state_mean"], f64["state_std"], f64["action_mean"],
                   f64["action_std"], identity, f64.get("train_rmse"))


def codec_training_arrays(dataset: TrajectoryDataset):
    states = np.concatenate([self_local(dataset.features(i)) for i in range(len(dataset.episodes))])
    actions = np.concatenate([dataset.actions(i) for i in range(len(dataset.episodes))])
    return states, actions


def train_codec(dataset: TrajectoryDataset, cfg: CodecConfig, seed: int, log=None) -> LatentCodec:
    """Fit encoder/decoder to minimise squared reconstruction error in normalized action units."""
    if cfg.identity:
        return LatentCodec.identity_codec(dataset.repr)
    states, actions = codec_training_arrays(dataset)
    # stats are rounded to f32 up front so a saved codec reloads bit-identically
    f32 = lambda x: x.astype(np.float32).astype(np.float64)  # noqa: E731
    s_mean, s_std = f32(states.mean(0)), f32(np.maximum(states.std(0), 1e-6))
    a_mean, a_std = f32(actions.mean(0)), f32(np.maximum(actions.std(0), 1e-6))
    sn = (states - s_mean) / s_std
    an = (actions - a_mean) / a_std
    rng = np.random.default_rng(seed)
    sd = states.shape[1]
    enc = DenseNet.build([sd + ACTION_DIM, *cfg.hidden, cfg.z_dim], rng)
    dec = DenseNet.build([sd + cfg.z_dim, *cfg.hidden, ACTION_DIM], rng)
    opt = Adam(enc.params() + dec.params(), lr=cfg.lr,
               names=[f"encoder.{n}" for n in enc.param_names()] + [f"decoder.{n}" for n in dec.param_names()])
    n = len(sn)
    sn32, an32 = sn.astype(np.float32), an.astype(np.float32)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n - cfg.batch + 1, cfg.batch):
            idx = perm[start:start + cfg.batch]
            s, a = sn32[idx], an32[idx]
            z = enc.forward(np.concatenate([s, a], axis=1))
            rec = dec.forward(np.concatenate([s, z], axis=1))
            diff = rec - a
            loss = float(np.mean(np.sum(diff.astype(np.float64) ** 2, axis=1)))
            if not np.isfinite(loss):
                raise TrainingError(f"codec loss diverged at epoch {epoch}")
            total += loss * len(idx)
            g_in = dec.backward(2.0 * diff / len(idx))
            dec_grads = dec.grads
            enc.backward(g_in[:, sd:])
            grads = enc.grads + dec_grads
            clip_grad_norm(grads, 10.0)
            opt.step(grads)
        if log:
            log(f"codec epoch {epoch}: loss {total / n:.5f}")
    codec = LatentCodec(enc, dec, cfg.z_dim, dataset.repr, s_mean, s_std, a_mean, a_std)
    codec.train_rmse = reconstruction_rmse(codec, states, actions)
    return codec


def reconstruction_rmse(codec: LatentCodec, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-dimension RMSE of ``decode_raw(encode(a))`` against ``a`` in raw action units."""
    z = codec.encode(states, actions)
    rec = codec.decode_raw(states, z)
    return np.sqrt(np.mean((rec - actions) ** 2, axis=0))
