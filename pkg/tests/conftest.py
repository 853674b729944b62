import numpy as np
import pytest

from prunelora import ModelConfig, SyntheticTaskSpec, generate, init_weights


def finite_diff(f, tensor, h=1e-5):
    """Central differences of a scalar function wrt every tensor entry."""
    g = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = tensor.data[idx]
        tensor.data[idx] = orig + h
        fp = f()
        tensor.data[idx] = orig - h
        fm = f()
        tensor.data[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def micro_config():
    """Small enough for exhaustive finite-difference sweeps."""
    return ModelConfig(num_layers=2, num_heads=2, hidden=8, ffn_dim=16,
                       vocab_size=13, max_positions=8, num_classes=2)


@pytest.fixture
def toy_config():
    return ModelConfig(vocab_size=16, max_positions=16)


@pytest.fixture
def toy_weights(toy_config):
    return init_weights(toy_config, seed=0)


@pytest.fixture
def parity_batch():
    spec = SyntheticTaskSpec(kind="parity", seq_len=8, vocab_size=16, seed=0,
                             train_size=32, eval_size=8)
    train, _ = generate(spec)
    return train


@pytest.fixture
def micro_batch():
    spec = SyntheticTaskSpec(kind="parity", seq_len=4, vocab_size=13, seed=2,
                             train_size=8, eval_size=4)
    train, _ = generate(spec)
    return train.slice(0, 4)
