import pytest

from ipidsim.harness.config import parse_config
from ipidsim.harness.scenario import build_world

ACCEPTANCE_LINES: list[str] = []


def make_world(data=None, seed=None, trace=None, warmup_ms=1000, record_emissions=False):
    """A built world with the client's handshake already done."""
    cfg = parse_config(data or {})
    world = build_world(cfg, seed, trace, record_emissions)
    world.net.run(until=warmup_ms)
    return world


def run_attack(world, process):
    attacker = world.attacker
    if attacker.rtt_ms is None:
        attacker.execute(attacker.measure_rtt())
    return attacker.execute(process)


@pytest.fixture
def world():
    return make_world()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
