import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from gpucc_sim import system as sysm  # noqa: E402
from gpucc_sim.trace import Trace  # noqa: E402

settings.register_profile("sim", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow])
settings.load_profile("sim")

FIXTURES = Path(__file__).resolve().parent / "fixtures"
ALL_STAGES = ("boot", "rpc", "faults", "scrubber", "uvm", "attestation")


@pytest.fixture
def make_system():
    """Factory for a small booted system; pass ``stages`` to stop early."""
    def make(seed=0, stages=ALL_STAGES, level=1, **mitigations):
        cfg = sysm.SystemConfig.small(seed=seed, mitigations=sysm.Mitigations(**mitigations))
        return sysm.build_system(cfg, Trace(level=level), stages=tuple(stages))
    return make


@pytest.fixture
def system(make_system):
    return make_system()


def pytest_terminal_summary(terminalreporter):
    from acceptance_results import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, title, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
