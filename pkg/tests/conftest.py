import os
import tempfile

import pytest

# keep tool files written by the package out of the user's home
os.environ.setdefault("IGUANE_HOME", tempfile.mkdtemp(prefix="iguane-home-"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def no_external_tools(monkeypatch):
    monkeypatch.delenv("IGUANE_TOOLS", raising=False)
