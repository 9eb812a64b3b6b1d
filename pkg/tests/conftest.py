import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_criteria: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion's verdict for the end-of-run summary."""
    label = request.node.get_closest_marker("criterion").args[0]
    details = []
    yield details.append
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    _criteria[label] = (ok, "; ".join(details))
    print(f"\n{'PASS' if ok else 'FAIL'} {label}" + (f" ({'; '.join(details)})" if details else ""))


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0][2:])):
        ok, detail = _criteria[label]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}" + (f"  [{detail}]" if detail else ""))
