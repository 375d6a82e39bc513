import json
import socket
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


class NetworkBlocked(RuntimeError):
    pass


def _blocked(*args, **kwargs):
    raise NetworkBlocked("tests must not open network connections")


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Every test runs with outbound connections disabled."""
    monkeypatch.setattr(socket.socket, "connect", _blocked)
    monkeypatch.setattr(socket.socket, "connect_ex", _blocked)
    monkeypatch.setattr(socket, "create_connection", _blocked)
    monkeypatch.setattr(socket, "getaddrinfo", _blocked)


@pytest.fixture
def weather_tools():
    return json.loads((FIXTURES / "weather_tools.json").read_text())


@pytest.fixture
def match_tools():
    return json.loads((FIXTURES / "matchschedules_tools.json").read_text())


XLAM_ANSWER = '[ forecast_weather_api(q="Chicago", days=7), forecast_weather_api(q="Toronto", days=7)]'


# acceptance criteria report -------------------------------------------------

ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
