import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_check(loss_fn, params, step=1e-5, tol=1e-4):
    """Assert central differences agree with backward() for every entry of ``params``."""
    from emoe import gradcheck

    entries, _ = gradcheck.check(loss_fn, params, step=step)
    worst = gradcheck.worst(entries)
    assert worst is not None
    assert worst.rel_error < tol, worst
    return worst


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(RESULTS[key])
