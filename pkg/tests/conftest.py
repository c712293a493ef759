import numpy as np
import pytest

from ipfed.config import RunConfig
from ipfed.data import generate_dataset
from ipfed.experiment import pretrain

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return RunConfig(
        num_clients=4,
        samples_per_client=6,
        rounds=3,
        num_pretrain_ids=12,
        num_eval_ids=8,
        eval_samples_per_id=4,
        input_dim=8,
        widths=(8, 8),
        d=6,
        pretrain_epochs=40,
        output_dir="unused",
    )


@pytest.fixture(scope="session")
def small_setup(small_cfg):
    ds = generate_dataset(small_cfg.dataset_spec, small_cfg.seed)
    return small_cfg, ds, pretrain(small_cfg, ds)


@pytest.fixture(scope="session")
def desk_setup():
    """Default desk-scale config, dataset and pre-trained extractor."""
    cfg = RunConfig(output_dir="unused")
    ds = generate_dataset(cfg.dataset_spec, cfg.seed)
    return cfg, ds, pretrain(cfg, ds)


@pytest.fixture
def acceptance():
    def record(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
