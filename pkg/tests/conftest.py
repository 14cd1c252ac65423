from dataclasses import replace

import pytest

from fedlppa.synth import default_4site_config, generate_federation, load_federation


def tiny_specs(n_train=12, n_test=4, size=32):
    return [replace(s, n_train=n_train, n_test=n_test, image_size=size) for s in default_4site_config()]


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    return generate_federation(tiny_specs(), 0, tmp_path_factory.mktemp("tiny") / "data")


@pytest.fixture(scope="session")
def tiny_sites(tiny_root):
    return load_federation(tiny_root)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
