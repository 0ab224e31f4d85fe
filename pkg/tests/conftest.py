import os

import pytest
import torch

from vmfnet.data import generate_samples

torch.set_num_threads(max(1, int(os.environ.get("VMFNET_TEST_THREADS", "1"))))


@pytest.fixture(scope="session")
def default_dataset():
    """The default 4-domain phantom dataset, generated once per session."""
    return generate_samples(seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    """A 32x32 three-domain dataset small enough for quick training runs."""
    return generate_samples(num_domains=3, subjects_per_domain=4, slices_per_subject=3, seed=1, size=32)


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
