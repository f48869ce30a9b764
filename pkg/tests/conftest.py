import sys

import pytest

from maskgroups.experiments import toy_corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    """A dozen training scenes: enough for layout, gradient and decoding tests."""
    return toy_corpus(n_train=12, n_holdout=4, seed=7)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.RESULTS):
            terminalreporter.write_line(line)
