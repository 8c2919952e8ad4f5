import numpy as np
import pytest

from dali.data import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    cfg = SynthConfig(num_users=40, num_items=120, num_groups=30, leadership_fraction=0.5,
                      group_size_min=2, group_size_max=4, items_min=4, items_max=8)
    return generate_synthetic(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_tsv(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
