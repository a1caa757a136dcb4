import numpy as np
import pytest

from atlasfuse.phantom import PhantomSpec, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(dims=(24, 24, 24), semi_axes=(7.0, 4.0, 5.0), n_atlases=6, seed=3)
    return generate_phantom(spec)


@pytest.fixture
def small_run_config():
    from atlasfuse.pipeline import load_config

    return load_config(
        {
            "n_atlases_selected": 5,
            "margin": 3,
            "fusion": {"k": 20, "forest": {"n_tree": 10}},
            "seed": 7,
        }
    )


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    lines = request.config.stash[_CRITERIA]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
