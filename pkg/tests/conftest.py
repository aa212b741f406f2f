import pytest


def pytest_addoption(parser):
    parser.addoption("--skip-long", action="store_true", help="skip full-scale tests")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-long"):
        return
    skip = pytest.mark.skip(reason="--skip-long given")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def protocol_n3():
    """Default protocol on three traps, shared by the observable and experiment tests."""
    from polariton_mott.experiments import ProtocolConfig, run_protocol

    return run_protocol(ProtocolConfig(n_sites=3))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
