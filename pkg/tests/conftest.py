import numpy as np
import pytest

from lutllm import model as mr
from lutllm.perf import ModelConfig
from lutllm.vq import SchemeConfig

# small enough for exhaustive checks, large enough to exercise GQA and every projection
TINY_MODEL = ModelConfig(hidden=64, heads=4, kv_group=2, head_dim=16, ffn=128, depth=2, vocab=64)
TINY_SCHEME = SchemeConfig("coquant", G=16, v=2, c_w=4, c_a=8)


@pytest.fixture(scope="session")
def desk_dense():
    return mr.init_dense_model(mr.DESK_MODEL, seed=0)


@pytest.fixture(scope="session")
def desk_quant(desk_dense):
    calib = np.random.default_rng(1).integers(0, mr.DESK_MODEL.vocab, size=256)
    return mr.quantize_model(desk_dense, mr.DESK_SCHEME, calib, seed=0, max_iters=30)


@pytest.fixture(scope="session")
def tiny_dense():
    return mr.init_dense_model(TINY_MODEL, seed=3)


@pytest.fixture(scope="session")
def tiny_quant(tiny_dense):
    return mr.quantize_model(tiny_dense, TINY_SCHEME, np.arange(48) % TINY_MODEL.vocab, seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results.values():
            terminalreporter.write_line(line)
