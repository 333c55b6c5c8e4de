import pytest

from loratrace.model import ModelConfig, generate_model

FLAGSHIP = ModelConfig(hidden_size=64, mlp_size=176, num_layers=8, vocab_size=256)

# filled by test_acceptance, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def flagship_cfg():
    return FLAGSHIP


@pytest.fixture(scope="session")
def flagship_base():
    return generate_model(FLAGSHIP, 11)


@pytest.fixture
def small_cfg():
    return ModelConfig(hidden_size=16, mlp_size=40, num_layers=2, vocab_size=64)


@pytest.fixture
def small_model(small_cfg):
    return generate_model(small_cfg, 5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
