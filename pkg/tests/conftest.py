import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from r3mem.revformer import ModelConfig, attach_adapters, init_base  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
MEMO_DOCS = Path(__file__).parent.parent / "src" / "r3mem" / "data" / "memo_docs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_heads=2, n_layers=2, ffn_dim=32, window=40, mem_tokens=2, adapter_rank=4)
    base.update(kw)
    return ModelConfig(**base)


def random_adapted(cfg: ModelConfig, seed: int = 0, up_std: float = 0.0):
    """Random base plus adapters; ``up_std`` > 0 makes the adapters non-trivial."""
    g = np.random.default_rng(seed)
    p = attach_adapters(init_base(cfg, g), g)
    if up_std:
        for k in p.trainable_names():
            if k.endswith("_up"):
                p[k].data = (g.standard_normal(p[k].shape) * up_std).astype(cfg.dtype)
    return p


@pytest.fixture
def tiny64():
    cfg = tiny_config(precision=64)
    return random_adapted(cfg, seed=3, up_std=0.05)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
