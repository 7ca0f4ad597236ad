import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from numunits.lstm import init_model  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a model or runs the desk pipeline")


def oracle_params(model):
    return {
        "embedding": model.embedding.tolist(),
        "layers": [(l.w_x.tolist(), l.w_h.tolist(), l.b.tolist()) for l in model.layers],
        "w_out": model.w_out.tolist(),
        "b_out": model.b_out.tolist(),
    }


@pytest.fixture
def small_model():
    """Two-layer model with non-trivial output bias over a toy vocabulary."""
    vocab = ["<eos>", "<unk>", "the", "boy", "boys", "greets", "greet", "near", "car", "cars"]
    m = init_model(vocab, embed_dim=5, hidden_dim=4, n_layers=2, seed=3)
    m.b_out[:] = np.random.default_rng(0).normal(0, 0.3, m.vocab_size)
    for layer in m.layers:
        layer.w_h *= 3.0     # push gates away from 0.5
    return m


ACCEPTANCE: dict = {}


def report(n: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance-criterion line."""
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
