import time

import pytest
import torch

from iat.config import DatasetSpec, IATConfig
from iat.synthvid import generate_dataset

torch.set_num_threads(1)


def tiny_config(**overrides) -> IATConfig:
    """Small but complete configuration: few videos, batch of 4, short epochs."""
    base = dict(data__num_videos=6, data__frames_per_video=8, data__seed=3,
                train__batch_size=4, train__steps_per_epoch=5, train__epochs=4,
                train__decay_epochs=(1, 2, 3), train__checkpoint_every=0,
                inst__K=10)
    base.update(overrides)
    return IATConfig().replace(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_config().data)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """IAT-O with a 100-key bank, trained for the full default schedule (a few minutes on CPU).

    Returns ``(checkpoint_path, metrics_path, seconds)``.
    """
    from iat.trainer import fit

    cfg = IATConfig().replace(inst__K=100)
    out = tmp_path_factory.mktemp("iat_o")
    start = time.perf_counter()
    ckpt = fit(cfg, generate_dataset(cfg.data), out)
    return ckpt, out / "metrics.jsonl", time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
