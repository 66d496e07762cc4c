import numpy as np
import pytest

from mmoe.config import ModelConfig
from mmoe.model import Decoder
from mmoe.moe import convert_to_moe


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ffn=32, vocab_text=20, max_seq_len=32)
    base.update(kw)
    return ModelConfig(**base)


def randomize(model: Decoder, seed: int, scale: float = 0.3) -> Decoder:
    """Give routers and norms non-trivial values so no routing ties remain."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith(".moe.router"):
            t.data[:] = rng.normal(0.0, scale, size=t.shape)
        elif name.endswith("_norm"):
            t.data[:] = 1.0 + 0.1 * rng.normal(size=t.shape)
    return model


@pytest.fixture
def tiny_dense():
    return Decoder.init(tiny_config(), seed=0)


@pytest.fixture
def tiny_moe(tiny_dense):
    return randomize(convert_to_moe(tiny_dense, n_experts=4, top_k=2, seed=0), 1)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
