import numpy as np
import pytest

from gmekit.gme import GaussianMetaEmbedding, SharedPrecisionBasis


def random_psd(rng, d, scale=2.0):
    A = rng.standard_normal((d, d))
    Q, _ = np.linalg.qr(A)
    lam = rng.uniform(0.0, scale, size=d)
    return (Q * lam) @ Q.T


def random_gme(rng, d, scale=2.0, a_scale=1.0):
    return GaussianMetaEmbedding.dense(a_scale * rng.standard_normal(d), random_psd(rng, d, scale))


def random_basis(rng, d, scale=2.0):
    return SharedPrecisionBasis.from_matrix(random_psd(rng, d, scale) + 0.1 * np.eye(d))


@pytest.fixture
def rng():
    return np.random.default_rng(20180101)


# -- acceptance report --------------------------------------------------------

_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the run summary."""

    def record(number, title, passed, detail, seconds, budget):
        ok = passed and seconds < budget
        line = (
            f"acceptance {number}: {'PASS' if ok else 'FAIL'}  {title}  "
            f"[{detail}; {seconds:.1f}s of {budget:.0f}s]"
        )
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
