import numpy as np
import pytest

from qdlink.qmath import CascadeParams, bell_state, cascade_density, maximally_mixed, projector
from qdlink.tomography import setting_kets

P = CascadeParams()

TRUE_STATES = {
    "phi_plus": projector(bell_state("phi_plus")),
    "phi_minus": projector(bell_state("phi_minus")),
    "mixed": maximally_mixed(),
    "cascade_quarter": cascade_density(P.t_p / 4, P),
}


def born(rho, settings):
    kets = setting_kets(settings)
    return np.real(np.einsum("si,ij,sj->s", kets.conj(), rho, kets))


def expected_counts(rho, settings, per_setting):
    """Mean counts scaled so the average setting expects ``per_setting`` coincidences."""
    p = born(rho, settings)
    return per_setting * p / p.mean()


def sampled_counts(rho, settings, per_setting, rng):
    return rng.poisson(expected_counts(rho, settings, per_setting)).astype(float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
