import os

import numpy as np
import pytest
import torch

from idm.denoiser import DenoiserConfig, init_denoiser
from idm.imaging import RngStream, ToyFaceSpec, gen_toy_face

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


TINY = DenoiserConfig(base_channels=4, channel_multipliers=(1, 2), attention_scales=(2,),
                      gamma_embed_dim=16, norm_groups=2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_ckpt():
    return init_denoiser(TINY, RngStream(3))


@pytest.fixture(scope="session")
def toy_faces():
    return np.stack([gen_toy_face(ToyFaceSpec(size=32, palette_seed=i % 7), RngStream(11, i)) for i in range(8)])


class OracleDenoiser:
    """Returns the true clean image (model range) regardless of its inputs."""

    prediction_target = "x0"

    def __init__(self, x0_model):
        self.x0 = np.asarray(x0_model, dtype=np.float64)

    def predict(self, x_cond, x_noisy, gamma):
        return np.broadcast_to(self.x0, np.shape(x_noisy)).copy()


class ConditionCopier:
    """Predicts x0 as the conditioning image itself: an identity restorer."""

    prediction_target = "x0"

    def predict(self, x_cond, x_noisy, gamma):
        return np.array(x_cond, dtype=np.float64, copy=True)


@pytest.fixture
def oracle_cls():
    return OracleDenoiser


@pytest.fixture
def copier():
    return ConditionCopier()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("tests.test_acceptance") or __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
