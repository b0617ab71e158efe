import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moea_portfolio.synthetic import SyntheticSpec, generate_universe  # noqa: E402


@pytest.fixture(scope="session")
def small_market(tmp_path_factory):
    """A 200-asset, 4-period synthetic market written to disk once per session."""
    out = tmp_path_factory.mktemp("market")
    return generate_universe(SyntheticSpec(n_assets=200, n_periods=4, rng_seed=11), out)


@pytest.fixture(scope="session")
def market400(tmp_path_factory):
    out = tmp_path_factory.mktemp("market400")
    return generate_universe(SyntheticSpec(n_assets=400, n_periods=2, rng_seed=5), out)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
