import pytest

from binopt.config import config_from_dict


def tiny_config(**over):
    """A run small enough for unit tests: a few seconds of training."""
    base = dict(seed=0, dataset=dict(n=24, noise=0.5, classes=3), arch=dict(width=4, blocks=1),
                optimizer=dict(name="adam"), schedule=dict(iterations=30, batch_size=16),
                phases=dict(weight_decay=5e-6), log_interval=5)
    for k, v in over.items():
        if isinstance(v, dict):
            base.setdefault(k, {}).update(v)
        else:
            base[k] = v
    return config_from_dict(base)


@pytest.fixture
def tiny():
    return tiny_config


_VERDICTS = {}


def record_criterion(request, number, ok, detail):
    """Store an acceptance verdict for the end-of-run summary."""
    _VERDICTS[number] = (bool(ok), detail)


def pytest_runtest_logreport(report):
    # a criterion test that errors before recording still gets a FAIL line
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.failed and name.startswith("test_criterion_"):
        number = int(name.split("_")[2])
        _VERDICTS.setdefault(number, (False, f"{report.when} error"))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
