import pytest

from attnguide.encoder import ArchitectureConfig
from attnguide.guiding import GuidingConfig
from attnguide.harness import RunConfig

TINY_ARCH = dict(n_layers=2, n_heads=2, d_model=16, d_k=8, ffn_hidden=32, seq_len=24)


def tiny_run_config(**kw):
    base = dict(arch=ArchitectureConfig(**TINY_ARCH), guiding=GuidingConfig(alpha=0.01, beta=0.01),
                synthetic_n=90, epochs=2, batch_size=16, seed=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()
