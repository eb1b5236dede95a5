import numpy as np
import pytest

from cmvqa import kernels
from cmvqa.model import NetworkConfig, VQANetwork
from cmvqa.train import TrainingExample


@pytest.fixture(params=kernels.available())
def backend(request):
    with kernels.using(request.param):
        yield request.param


def small_config(**kw):
    base = dict(question_vocab=12, answer_vocab=12, d_q=8, d_h=8, d_x=8, d_v=8, K=4)
    base.update(kw)
    return NetworkConfig(**base)


def small_network(seed=0, **kw):
    return VQANetwork(small_config(**kw)).init(np.random.default_rng(seed))


def small_example(cfg, seed=1):
    """Six tokens: three question words, <?>, two answer words; targets end in <eoa>."""
    rng = np.random.default_rng(seed)
    q = [int(t) for t in rng.integers(4, cfg.question_vocab, size=3)]
    a = [int(t) for t in rng.integers(4, cfg.answer_vocab, size=2)]
    return TrainingExample("ex", q + [2] + a, a + [3],
                           rng.normal(size=(cfg.K, cfg.d_x)), rng.normal(size=cfg.d_v))
