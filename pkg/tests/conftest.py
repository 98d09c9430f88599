import numpy as np
import pytest

from stackelmac.config import EnvConfig, GameWeights, PolicyConfig


@pytest.fixture
def weights():
    return GameWeights()


@pytest.fixture
def small_env_config():
    """2 UEs, 2 RBGs, deterministic medium channel, no erasures."""
    return EnvConfig(num_ues_range=(1, 2, 3), num_rbgs=2, episode_len=8,
                     arrival_probs=(1.0,), tbler=0.0,
                     spectral_eff=(2.0,), channel_transition=((1.0,),),
                     channel_change_period=1, csi_error_prob=0.0,
                     ucm_len=2, ucm_vocab_size=4)


@pytest.fixture
def tiny_policy_config():
    return PolicyConfig(n_blocks=1, d_model=16, n_heads=2, d_ff=24,
                        max_seq_len=96, i_max=6)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
