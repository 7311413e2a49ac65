import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tessfit.synth import SynthSpec, generate

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled by the acceptance module, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def small_laguerre():
    return generate(SynthSpec(dims=(16, 16, 16), n=6, seed=4))


@pytest.fixture(scope="session")
def small_gbpd():
    return generate(SynthSpec(dims=(16, 16, 16), n=6, seed=5, kind="gbpd"))


def random_labels(rng, dims, n):
    """Random grain map where every label 1..n has at least two voxels."""
    size = int(np.prod(dims))
    lab = rng.integers(1, n + 1, size=size)
    lab[: 2 * n] = np.repeat(np.arange(1, n + 1), 2)
    rng.shuffle(lab)
    return lab.reshape(dims)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key:>2}: {line}")
