"""Shared fixtures: a tiny end-to-end pipeline that trains in seconds."""

import os
from pathlib import Path

import numpy as np
import pytest

from desk import Desk
from noisenav.codec import train_codec
from noisenav.config import CodecConfig, PriorConfig, make_profile
from noisenav.expert import generate_dataset
from noisenav.prior import train_prior

TINY_PRIOR = PriorConfig(hidden=[64, 64], epochs=2, windows_per_epoch=2048, batch=128, chunk_frames=8)


def tiny_cfg(**ppo):
    cfg = make_profile("desk")
    cfg.prior = TINY_PRIOR
    return cfg.replace(ppo={"n_envs": 8, "horizon": 8, "minibatch_size": 32, "mini_epochs": 2,
                            "base_hidden": [32, 32], "task_hidden": [16, 8], "k": 4, **ppo})


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_dataset(40, 80, "compact", seed=2)


@pytest.fixture(scope="session")
def tiny_codec(tiny_ds):
    return train_codec(tiny_ds, CodecConfig(hidden=[32, 32], epochs=1, batch=256), seed=0)


@pytest.fixture(scope="session")
def tiny_prior(tiny_ds, tiny_codec):
    model, _ = train_prior(tiny_ds, tiny_codec, TINY_PRIOR, seed=0)
    return model


@pytest.fixture(scope="session")
def tiny_artifacts(tmp_path_factory, tiny_ds, tiny_codec, tiny_prior):
    d = tmp_path_factory.mktemp("tiny")
    tiny_ds.save(d / "data.napd")
    tiny_codec.save(d / "codec.napc")
    tiny_prior.save(d / "prior.napc")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    keep = os.environ.get("NAP_ACCEPT_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return Desk(root)
