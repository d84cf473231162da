import numpy as np
import pytest

from fourdvc.synthetic import synthetic_sequences

def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line, then assert the outcome."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {number}: {title} | {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line
    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """3 classes x 6 frames, 12 vertices, 16x16 textures."""
    return synthetic_sequences(classes=3, frames=6, vertices=12, texture=16, seed=7)


@pytest.fixture
def corpus_dir(tmp_path):
    from fourdvc.synthetic import make_synthetic_dataset
    return make_synthetic_dataset(str(tmp_path / "corpus"), classes=2, frames=6, vertices=10, texture=16, seed=3)
