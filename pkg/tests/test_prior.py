import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_PRIOR
from noisenav.config import SimConfig
from noisenav.nn import ConfigError, UsageError
from noisenav.prior import (
    DenoiserModel, HistoryBuffer, LinearDenoiser, NoiseSchedule, ZeroDenoiser, build_denoiser,
    build_init_noise, ddim_denoise, diffusion_loss, guided_denoise, guided_sample_chunk, repeat_noise,
    sample_chunk, train_prior,
)
from noisenav.selftest import check_ddim
from noisenav.sim import CharacterState


def _closed_form_scale(a, steps, t_train=50):
    betas = [1e-4 + (2e-2 - 1e-4) * i / (t_train - 1) for i in range(t_train)]
    ab = [math.prod(1 - b for b in betas[:t + 1]) for t in range(t_train)]
    scale = 1.0
    for j, t in enumerate(steps):
        x0 = (1 - math.sqrt(1 - ab[t]) * a) / math.sqrt(ab[t])
        if j + 1 < len(steps):
            scale *= math.sqrt(ab[steps[j + 1]]) * x0 + math.sqrt(1 - ab[steps[j + 1]]) * a
        else:
            scale *= x0
    return scale


def test_schedule_shape():
    s = NoiseSchedule()
    assert s.ddim_indices == [49, 39, 29, 19, 9]
    assert np.all(np.diff(s.alphas_bar) < 0)
    assert 0 < s.alphas_bar[-1] < s.alphas_bar[0] < 1
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(2e-2)
    with pytest.raises(ConfigError):
        NoiseSchedule(ddim_steps=0)


def test_ddim_oracles():
    assert check_ddim() <= 1e-6


def test_zero_stub_single_step(rng):
    init = rng.normal(size=(2, 4, 3))
    out = ddim_denoise(ZeroDenoiser(), NoiseSchedule(ddim_steps=1), init, np.zeros((2, 6)))
    assert np.allclose(out, init / math.sqrt(NoiseSchedule().alphas_bar[49]), atol=1e-12)


@pytest.mark.parametrize("a", [0.0, 0.2, -0.5])
def test_stride_one_vs_five_steps(a, rng):
    init = rng.normal(size=(1, 4, 3))
    stub = LinearDenoiser(a, chunk_frames=4, d_x=3, history=2)
    full = ddim_denoise(stub, NoiseSchedule(ddim_steps=50), init, np.zeros((1, 6)))
    five = ddim_denoise(stub, NoiseSchedule(), init, np.zeros((1, 6)))
    s50 = _closed_form_scale(a, list(range(49, -1, -1)))
    s5 = _closed_form_scale(a, [49, 39, 29, 19, 9])
    assert np.allclose(full, s50 * init, atol=1e-9)
    assert np.max(np.abs(full - five)) <= abs(s50 - s5) * np.max(np.abs(init)) + 1e-9


def test_ddim_deterministic(tiny_prior, rng):
    init = rng.normal(size=(3, tiny_prior.chunk_frames, tiny_prior.d_x))
    hist = rng.normal(size=(3, tiny_prior.history * tiny_prior.d_x))
    a = ddim_denoise(tiny_prior, tiny_prior.schedule, init, hist)
    b = ddim_denoise(tiny_prior, tiny_prior.schedule, init, hist)
    assert a.tobytes() == b.tobytes()


def test_unfilled_history_rejected(rng):
    with pytest.raises(UsageError):
        ddim_denoise(ZeroDenoiser(), NoiseSchedule(), rng.normal(size=(1, 4, 3)), None)
    with pytest.raises(UsageError):
        ddim_denoise(ZeroDenoiser(), NoiseSchedule(), rng.normal(size=(1, 4, 3)), np.full((1, 6), np.nan))


def test_repeat_noise_rows_equal(rng):
    omega = rng.normal(size=(2, 5))
    init = repeat_noise(omega, 8)
    assert init.shape == (2, 8, 5)
    assert all(np.array_equal(init[:, j], omega) for j in range(8))


def test_action_only_noise(rng):
    omega = rng.normal(size=(2, 4))
    rngs = [np.random.default_rng(i) for i in range(2)]
    init = build_init_noise(omega, 8, state_dim=13, action_only=True, rngs=rngs)
    assert init.shape == (2, 8, 17)
    assert all(np.array_equal(init[:, j, 13:], omega) for j in range(8))
    assert not np.array_equal(init[:, 0, :13], init[:, 1, :13])


def test_sample_chunk_prefix_and_bounds(tiny_prior, rng):
    omega = rng.normal(size=(2, tiny_prior.d_x))
    hist = np.zeros((2, tiny_prior.history * tiny_prior.d_x))
    z1, s1 = sample_chunk(tiny_prior, tiny_prior.schedule, omega, 1, hist)
    z2, s2 = sample_chunk(tiny_prior, tiny_prior.schedule, omega, 2, hist)
    assert z1.shape == (2, 1, tiny_prior.z_dim) and s2.shape == (2, 2, tiny_prior.state_dim)
    assert np.array_equal(z1[:, 0], z2[:, 0]) and np.array_equal(s1[:, 0], s2[:, 0])
    with pytest.raises(ConfigError):
        sample_chunk(tiny_prior, tiny_prior.schedule, omega, tiny_prior.chunk_frames + 1, hist)


def test_normalize_roundtrip(tiny_prior, rng):
    x = rng.normal(size=(5, tiny_prior.d_x)) * 3
    assert np.allclose(tiny_prior.denormalize(tiny_prior.normalize(x)), x, atol=1e-6)


def test_zero_net_loss_expectation(rng):
    cfg = TINY_PRIOR
    d_x = 17
    model = build_denoiser(cfg, "compact", 4, np.zeros(d_x), np.ones(d_x), rng)
    for p in model.net.params():
        if p.ndim == 2:
            p[:] = 0.0
    b = 4000
    x0 = rng.normal(size=(b, cfg.chunk_frames, d_x))
    hist = rng.normal(size=(b, cfg.history * d_x))
    t = rng.integers(0, 50, b)
    noise = rng.standard_normal(x0.shape)
    loss = diffusion_loss(model, x0, hist, t, noise)
    want = d_x * cfg.chunk_frames
    assert abs(loss - want) < 4 * math.sqrt(2 * want / b) * 3


def test_training_deterministic(tiny_ds, tiny_codec, tiny_prior, tmp_path):
    again, losses = train_prior(tiny_ds, tiny_codec, TINY_PRIOR, seed=0)
    tiny_prior.save(tmp_path / "a.napc")
    again.save(tmp_path / "b.napc")
    assert (tmp_path / "a.napc").read_bytes() == (tmp_path / "b.napc").read_bytes()
    assert len(losses) == TINY_PRIOR.epochs and all(np.isfinite(losses))


def test_save_load(tiny_prior, tmp_path, rng):
    tiny_prior.save(tmp_path / "p.napc")
    back = DenoiserModel.load(tmp_path / "p.napc")
    assert back.schedule.ddim_indices == tiny_prior.schedule.ddim_indices
    assert (back.chunk_frames, back.history, back.d_x, back.repr) == (8, 4, 17, "compact")
    omega = rng.normal(size=(2, 17))
    hist = rng.normal(size=(2, 68))
    a = sample_chunk(tiny_prior, tiny_prior.schedule, omega, 4, hist)
    b = sample_chunk(back, back.schedule, omega, 4, hist)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def _quadratic(target):
    def loss_grad(x0):
        d = x0 - target
        return 0.5 * np.sum(d * d), d
    return loss_grad


def test_guidance_g0_is_unguided(tiny_prior):
    hist = np.zeros((2, 68))
    rngs = lambda: [np.random.default_rng(i) for i in range(2)]  # noqa: E731
    z, s, flagged = guided_sample_chunk(tiny_prior, tiny_prior.schedule, 4, hist, _quadratic(0.0), 0, 0.05, rngs())
    init = np.stack([r.standard_normal((8, 17)) for r in rngs()])
    x0 = tiny_prior.denormalize(ddim_denoise(tiny_prior, tiny_prior.schedule, init, hist)[:, :4])
    assert np.array_equal(z, x0[..., 13:]) and np.array_equal(s, x0[..., :13])
    assert not flagged.any()


def test_guidance_moves_toward_minimizer(rng):
    target = np.full((1, 4, 3), 0.7)
    init = rng.normal(size=(1, 4, 3))
    dists = []
    for g in (0, 1, 2, 5, 10, 20):
        x0, _ = guided_denoise(ZeroDenoiser(), NoiseSchedule(), init, np.zeros((1, 6)), _quadratic(target), g, 0.05)
        dists.append(np.linalg.norm(x0 - target))
    assert all(b < a for a, b in zip(dists, dists[1:]))


def test_guidance_nfe_accounting(tiny_prior):
    tiny_prior.nfe.reset()
    guided_sample_chunk(tiny_prior, tiny_prior.schedule, 4, np.zeros((1, 68)), _quadratic(0.0), 10, 0.05,
                        [np.random.default_rng(0)])
    assert (tiny_prior.nfe.forward, tiny_prior.nfe.guidance) == (5, 50)
    tiny_prior.nfe.reset()
    sample_chunk(tiny_prior, tiny_prior.schedule, np.zeros((1, 17)), 4, np.zeros((1, 68)))
    assert (tiny_prior.nfe.forward, tiny_prior.nfe.guidance) == (5, 0)


def test_guidance_nonfinite_falls_back(rng):
    init = rng.normal(size=(2, 4, 3))
    hist = np.zeros((2, 6))

    def bad(x0):
        g = np.zeros_like(x0)
        g[0] = np.nan
        return 0.0, g

    x0, flagged = guided_denoise(ZeroDenoiser(), NoiseSchedule(), init, hist, bad, 3, 0.05)
    plain = ddim_denoise(ZeroDenoiser(), NoiseSchedule(), init, hist)
    assert flagged.tolist() == [True, False]
    assert np.array_equal(x0, plain)


def _buffer(model, n=2):
    return HistoryBuffer.for_model(model, n, SimConfig())


def test_history_fresh_is_mean(tiny_prior):
    buf = _buffer(tiny_prior)
    buf.reset(np.arange(2), CharacterState.zeros(2))
    frames = buf.frames()
    assert buf.features().shape == (2, tiny_prior.history * tiny_prior.d_x)
    assert np.allclose(tiny_prior.denormalize(frames), tiny_prior.mean)


@settings(max_examples=10, deadline=None)
@given(pushes=st.integers(1, 9), seed=st.integers(0, 1000))
def test_history_ring(tiny_prior, pushes, seed):
    rng = np.random.default_rng(seed)
    buf = _buffer(tiny_prior, 1)
    buf.reset([0], CharacterState.zeros(1))
    zs = [rng.normal(size=(1, 4)) for _ in range(pushes)]
    for z in zs:
        st_ = CharacterState.zeros(1)
        st_.p = rng.normal(size=(1, 2))
        buf.push(st_, z)
    raw = tiny_prior.denormalize(buf.frames())[0]
    h = tiny_prior.history
    real = zs[-h:]
    for j, z in enumerate(real):
        assert np.allclose(raw[h - len(real) + j, 13:], z[0], atol=1e-9)
    # padded slots read as the mean frame
    for j in range(h - len(real)):
        assert np.allclose(raw[j], tiny_prior.mean, atol=1e-9)
    # the newest state is the anchor: zero offset, facing forward
    assert np.allclose(raw[-1, :4], [0, 0, 0, 1], atol=1e-9)


def test_history_push_respects_active(tiny_prior):
    buf = _buffer(tiny_prior)
    buf.reset(np.arange(2), CharacterState.zeros(2))
    buf.push(CharacterState.zeros(2), np.ones((2, 4)), active=np.array([True, False]))
    assert buf.count.tolist() == [1, 0]
