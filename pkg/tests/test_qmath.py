import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdlink.qmath import (
    BELL_NAMES,
    CascadeParams,
    bell_fidelities,
    bell_state,
    cascade_density,
    cascade_state,
    check_density_matrix,
    concurrence,
    concurrence_eig,
    fidelity_to_state,
    is_density_matrix,
    maximally_mixed,
    mix_with_white_noise,
    projector,
    purity,
    random_density_matrix,
    random_unitary,
    state_fidelity,
    su2,
    apply_local_unitary,
    SIGMA_X,
    IDENTITY2,
)

P = CascadeParams()
S = 1 / np.sqrt(2)
seeds = st.integers(0, 2**32 - 1)


class TestConstants:
    def test_period(self):
        # h / 2.1 ueV = 1.969 ns
        assert P.t_p == pytest.approx(1969.365, abs=1e-3)
        assert P.t_p == pytest.approx(1970, rel=1e-3)

    def test_rep_period(self):
        assert P.t_rep_ps == pytest.approx(3278.688, abs=1e-3)

    @pytest.mark.parametrize("field", ["fss", "t1_x", "t1_xx", "t_rep"])
    def test_positive(self, field):
        with pytest.raises(ValueError):
            CascadeParams(**{field: 0.0})


class TestBellStates:
    def test_amplitudes(self):
        np.testing.assert_allclose(bell_state("phi_plus"), [S, 0, 0, S])
        np.testing.assert_allclose(bell_state("phi_minus"), [S, 0, 0, -S])
        np.testing.assert_allclose(bell_state("psi_plus"), [0, S, S, 0])
        np.testing.assert_allclose(bell_state("psi_minus"), [0, S, -S, 0])

    def test_orthonormal(self):
        b = np.array([bell_state(n) for n in BELL_NAMES])
        np.testing.assert_allclose(b.conj() @ b.T, np.eye(4), atol=1e-15)

    def test_unknown(self):
        with pytest.raises(ValueError):
            bell_state("ghz")


class TestCascade:
    def test_zero_delay_is_phi_plus(self):
        np.testing.assert_allclose(cascade_state(0.0, P), bell_state("phi_plus"), atol=1e-15)

    def test_half_period_is_phi_minus(self):
        assert abs(np.vdot(bell_state("phi_minus"), cascade_state(P.t_p / 2, P))) ** 2 == pytest.approx(1, abs=1e-12)

    def test_full_period(self):
        # h and hbar are independently truncated, so 2 pi hbar = h only to ~1e-7
        np.testing.assert_allclose(cascade_state(P.t_p, P), bell_state("phi_plus"), atol=1e-6)

    def test_density_zero_delay(self):
        rho = cascade_density(0.0, P)
        expect = np.zeros((4, 4))
        expect[0, 0] = expect[3, 3] = expect[0, 3] = expect[3, 0] = 0.5
        np.testing.assert_allclose(rho, expect, atol=1e-15)

    def test_quarter_period_corners_imaginary(self):
        rho = cascade_density(P.t_p / 4, P)
        assert rho[0, 3] == pytest.approx(-0.5j, abs=1e-6)
        assert rho[3, 0] == pytest.approx(0.5j, abs=1e-6)
        assert abs(rho[0, 3].real) < 1e-6

    def test_negative_delay_rejected(self):
        with pytest.raises(ValueError):
            cascade_state(-1.0, P)
        with pytest.raises(ValueError):
            cascade_density(-1.0, P)

    def test_reduced_coherence(self):
        rho = cascade_density(0.0, P, coherence=0.9)
        assert fidelity_to_state(rho, bell_state("phi_plus")) == pytest.approx(0.95)
        assert concurrence(rho) == pytest.approx(0.9)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1e5))
    def test_density_is_outer_product(self, t):
        np.testing.assert_allclose(cascade_density(t, P), projector(cascade_state(t, P)), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1e5))
    def test_fidelity_closed_form(self, t):
        f = fidelity_to_state(cascade_density(t, P), bell_state("phi_plus"))
        assert f == pytest.approx((1 + np.cos(P.omega * t)) / 2, abs=1e-9)


class TestMixing:
    def test_full_mixing(self):
        np.testing.assert_allclose(mix_with_white_noise(projector(bell_state("phi_plus")), 1.0), np.eye(4) / 4)

    def test_no_mixing(self):
        rho = projector(bell_state("phi_plus"))
        np.testing.assert_allclose(mix_with_white_noise(rho, 0.0), rho)

    def test_half_mixing_fidelity(self):
        rho = mix_with_white_noise(projector(bell_state("phi_plus")), 0.5)
        assert fidelity_to_state(rho, bell_state("phi_plus")) == pytest.approx(0.625)

    @pytest.mark.parametrize("p", [-0.1, 1.1])
    def test_out_of_range(self, p):
        with pytest.raises(ValueError):
            mix_with_white_noise(np.eye(4) / 4, p)


class TestLocalUnitary:
    def test_identity(self):
        rho = random_density_matrix(np.random.default_rng(0))
        np.testing.assert_allclose(apply_local_unitary(rho, IDENTITY2, IDENTITY2), rho)

    def test_xx_stabilizes_phi_plus(self):
        rho = projector(bell_state("phi_plus"))
        np.testing.assert_allclose(apply_local_unitary(rho, SIGMA_X, SIGMA_X), rho, atol=1e-15)

    def test_rejects_non_unitary(self):
        with pytest.raises(ValueError):
            apply_local_unitary(np.eye(4) / 4, 2 * IDENTITY2, IDENTITY2)

    def test_preserves_spectrum(self):
        rng = np.random.default_rng(1)
        rho = random_density_matrix(rng)
        out = apply_local_unitary(rho, random_unitary(rng), random_unitary(rng))
        np.testing.assert_allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(rho), atol=1e-12)
        assert np.trace(out).real == pytest.approx(1)


class TestFidelity:
    def test_mixed(self):
        assert fidelity_to_state(maximally_mixed(), bell_state("phi_plus")) == pytest.approx(0.25)

    def test_pure(self):
        assert fidelity_to_state(projector(bell_state("phi_plus")), bell_state("phi_plus")) == pytest.approx(1)

    def test_half_period_phi_minus(self):
        assert fidelity_to_state(cascade_density(P.t_p / 2, P), bell_state("phi_minus")) == pytest.approx(1, abs=1e-12)

    def test_uhlmann_reduces_to_overlap_for_pure_target(self):
        rng = np.random.default_rng(3)
        rho = random_density_matrix(rng)
        psi = bell_state("psi_minus")
        assert state_fidelity(rho, projector(psi)) == pytest.approx(fidelity_to_state(rho, psi), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(seeds, st.integers(1, 4))
    def test_bell_sum_rule(self, seed, rank):
        rho = random_density_matrix(np.random.default_rng(seed), rank)
        assert sum(bell_fidelities(rho).values()) == pytest.approx(1, abs=1e-9)


class TestConcurrence:
    def test_bell(self):
        for name in BELL_NAMES:
            assert concurrence(projector(bell_state(name))) == pytest.approx(1, abs=1e-12)

    def test_mixed(self):
        assert concurrence(maximally_mixed()) == 0.0

    def test_product_state(self):
        psi = np.kron([1, 0], [S, S])
        assert concurrence(projector(psi)) == pytest.approx(0, abs=1e-12)

    def test_werner(self):
        # Werner state: C = max(0, 1 - 3p/2)
        for p in (0.1, 0.3, 0.5, 0.7):
            rho = mix_with_white_noise(projector(bell_state("phi_plus")), p)
            assert concurrence(rho) == pytest.approx(max(0.0, 1 - 1.5 * p), abs=1e-12)

    def test_cascade_every_delay(self):
        t = np.random.default_rng(5).uniform(0, 5 * P.t_rep_ps, 1000)
        err = max(abs(concurrence(cascade_density(x, P)) - 1) for x in t)
        assert err < 1e-9

    def test_rejects_non_psd(self):
        with pytest.raises(ValueError):
            concurrence(np.diag([0.6, 0.6, -0.1, -0.1]).astype(complex))

    @settings(max_examples=100, deadline=None)
    @given(seeds, st.integers(1, 4))
    def test_matches_eigenvalue_oracle(self, seed, rank):
        rho = random_density_matrix(np.random.default_rng(seed), rank)
        assert concurrence(rho) == pytest.approx(concurrence_eig(rho), abs=1e-7)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_local_unitary_invariance(self, seed):
        rng = np.random.default_rng(seed)
        rho = random_density_matrix(rng, int(rng.integers(1, 5)))
        c0 = concurrence(rho)
        c1 = concurrence(apply_local_unitary(rho, random_unitary(rng), random_unitary(rng)))
        assert c1 == pytest.approx(c0, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_in_unit_interval(self, seed):
        c = concurrence(random_density_matrix(np.random.default_rng(seed)))
        assert 0.0 <= c <= 1.0


class TestValidation:
    def test_valid(self):
        check_density_matrix(cascade_density(100.0, P))

    def test_not_hermitian(self):
        m = np.eye(4, dtype=complex) / 4
        m[0, 1] = 0.1
        assert not is_density_matrix(m)

    def test_trace(self):
        assert not is_density_matrix(np.eye(4) / 2)

    def test_negative(self):
        assert not is_density_matrix(np.diag([0.6, 0.5, 0.0, -0.1]))

    def test_purity(self):
        assert purity(maximally_mixed()) == pytest.approx(0.25)
        assert purity(cascade_density(10.0, P)) == pytest.approx(1)

    def test_su2_unitary(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            u = su2(*rng.uniform(-np.pi, np.pi, 3))
            np.testing.assert_allclose(u @ u.conj().T, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(su2(0, 0, 0), np.eye(2))
