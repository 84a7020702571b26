import pytest
import torch

from ganmem.data import make_dataset
from ganmem.models import ArchConfig, build_models
from ganmem.training import TrainHyper, pretrain_base

torch.set_num_threads(1)

# 16x16 desk fixture used by the long-running checks; TINY is for plumbing tests
TOY_ARCH = ArchConfig(noise_dim=32, image_size=16, n_blocks=2, block_channel_schedule=(32, 16))
TINY_ARCH = ArchConfig(noise_dim=8, image_size=8, n_blocks=1, block_channel_schedule=(8,))
TOY_PRETRAIN = TrainHyper(lr=5e-4, steps=1500, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def tiny_base():
    return build_models(TINY_ARCH, seed=0)


@pytest.fixture(scope="session")
def tiny_data():
    return make_dataset("rings", 64, TINY_ARCH.image_size, seed=3)


@pytest.fixture(scope="session")
def toy_base():
    """Desk-scale base GAN pretrained on the procedural source domain (~3 min)."""
    src = make_dataset("source", 2048, TOY_ARCH.image_size, seed=1)
    base, _ = pretrain_base(TOY_ARCH, src, TOY_PRETRAIN, seed=0)
    return base


# one line per acceptance criterion, printed after the run whatever the outcome
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
