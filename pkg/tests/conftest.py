import pytest
from hypothesis import HealthCheck, settings

from gatedrnn.numeric import Rng

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234)


def random_sequences(rng, n, lengths, feature_dim, num_classes):
    out = []
    for i in range(n):
        L = lengths[i % len(lengths)]
        out.append((rng.normal((L, feature_dim)), rng.integers(0, num_classes, L)))
    return out


@pytest.fixture
def make_sequences():
    return random_sequences



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
