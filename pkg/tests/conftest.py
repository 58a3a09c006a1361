import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from trdm.predictor import PredictorConfig
from trdm.sr_latent import AEConfig, EmbedConfig, LSRConfig
from trdm.sr_spatial import SRConfig

torch.set_num_threads(max(1, int(os.environ.get("TRDM_TEST_THREADS", "1"))))

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def tiny_predictor_config(**kw) -> PredictorConfig:
    base = dict(frame_size=8, base_channels=8, channel_mults=(1, 2), attention=(False, True),
                num_res_blocks=1, embed_dim=16, encoder_channels=(8, 8), encoder_blocks=1, heads=2)
    base.update(kw)
    return PredictorConfig(**base)


def tiny_sr_config(**kw) -> SRConfig:
    base = dict(image_size=16, factor=4, base_channels=8, channel_mults=(1, 2),
                attention=(False, True), num_res_blocks=1, heads=2)
    base.update(kw)
    return SRConfig(**base)


def tiny_ae_config(**kw) -> AEConfig:
    base = dict(image_size=32, channels=(8, 8, 8), blocks=1)
    base.update(kw)
    return AEConfig(**base)


def tiny_lsr_config(**kw) -> LSRConfig:
    ae = kw.pop("ae", tiny_ae_config())
    embed = kw.pop("embed", EmbedConfig(image_size=ae.latent_size, patch=2, width=16, layers=1, heads=2))
    base = dict(ae=ae, embed=embed, base_channels=8, channel_mults=(1, 2),
                attention=(False, True), num_res_blocks=1, heads=2)
    base.update(kw)
    return LSRConfig(**base)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


TINY_RUN = dict(
    synth_count=3, synth_size=64, hr_size=64, sr_factor=8,
    diffusion_steps=4, beta_start=0.05, beta_end=0.5,
    predictor_base_channels=8, predictor_channel_mults=(1, 2), predictor_attention=(False, True),
    predictor_res_blocks=1, predictor_embed_dim=16, predictor_encoder_channels=(8, 8),
    predictor_encoder_blocks=1,
    ssr_base_channels=8, ssr_channel_mults=(1, 2), ssr_attention=(False, True), ssr_res_blocks=1,
    ae_channels=(8, 8, 8), ae_blocks=1,
    lsr_base_channels=8, lsr_channel_mults=(1, 2), lsr_attention=(False, True), lsr_res_blocks=1,
    embed_patch=4, embed_width=16, embed_layers=1, embed_heads=2, heads=2,
    steps=3, batch_size=2, members=2,
)


@pytest.fixture
def tiny_run(tmp_path):
    from trdm.config import RunConfig

    return RunConfig(data_dir=str(tmp_path / "data"), checkpoint_dir=str(tmp_path / "ckpt"), **TINY_RUN)
