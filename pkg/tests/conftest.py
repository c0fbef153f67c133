from collections import defaultdict

import numpy as np
import pytest
import torch

_OUTCOMES = defaultdict(list)  # criterion -> [(test id, passed)]
_NOTES = defaultdict(list)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


def rel_err(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-12))


def randomize_(module, scale=0.3, seed=0):
    """Overwrite every parameter with Gaussian noise (breaks identity initialisations)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)
    return module


@pytest.fixture
def note(request):
    """Attach a line of detail to the acceptance summary of this test's criterion."""
    mark = request.node.get_closest_marker("criterion")
    return lambda text: _NOTES[mark.args[0]].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES[mark.args[0]].append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        runs = _OUTCOMES[n]
        failed = [name for name, ok in runs if not ok]
        verdict = "FAIL" if failed else "PASS"
        tr.write_line(f"criterion {n}: {verdict} ({len(runs) - len(failed)}/{len(runs)} checks)"
                      + (f" failed: {', '.join(failed)}" if failed else ""))
        for text in _NOTES.get(n, []):
            tr.write_line(f"    {text}")
