import pytest

from carecheck.cli import data_dir
from carecheck.protocol import SystemParams, parse_configuration


def fixed(config: str, n: int, q: int, **kw) -> SystemParams:
    c = parse_configuration(config)
    return SystemParams(n_services=n, queue_size=q, orc_config=c, service_configs=(c,) * n, **kw)


def offers_only(q: int = 3) -> SystemParams:
    return SystemParams(n_services=1, queue_size=q, p_choice=0, p_match=0, steps_capacity=0)


@pytest.fixture
def data():
    return data_dir()


# criterion number -> (outcome, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        outcome, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {outcome}: {title} | {detail}")
