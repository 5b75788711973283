import logging

import pytest
import torch

from einmemo.dataset import synth_task
from einmemo.frozen_model import ToyConfig, train_toy_frozen

TINY = dict(
    canvas_size=64,
    codebook_size=16,
    d_code=8,
    enc_width=16,
    dim=32,
    depth=1,
    heads=2,
    vq_epochs=2,
    vq_steps=4,
    vq_batch=4,
    pred_epochs=1,
    pred_steps=4,
    pred_batch=4,
)


def pytest_configure(config):
    logging.getLogger("einmemo").setLevel(logging.WARNING)
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_data():
    """Train/test split with 31-pixel cells, matching a 64-pixel canvas."""
    return synth_task(5, categories=4, per_class=6, cell=31, test_per_class=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    train, _ = tiny_data
    return train_toy_frozen(train, ToyConfig(**TINY), seed=0)


ACCEPTANCE: list[str] = []


def acceptance_line(criterion: int, ok: bool, detail: str, status: str | None = None) -> str:
    """Record one pass/fail line; printed now and again in the terminal summary."""
    line = f"ACCEPTANCE {criterion}: {status or ('PASS' if ok else 'FAIL')} | {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
