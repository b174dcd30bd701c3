"""Two-qubit polarization state algebra.

States are plain numpy arrays: a ket is a length-4 complex vector and a
density matrix a 4x4 complex array, both in the (HH, HV, VH, VV) basis with
the biexciton (XX) photon as the first qubit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

# CODATA, in micro-eV * ns
HBAR_UEV_NS = 0.6582119
H_UEV_NS = 4.135667

BASIS_LABELS = ("HH", "HV", "VH", "VV")

PSD_CLAMP = 1e-9

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY2 = np.eye(2, dtype=complex)
_SYSY = np.kron(SIGMA_Y, SIGMA_Y)

BellName = Literal["phi_plus", "phi_minus", "psi_plus", "psi_minus"]


@dataclass(frozen=True)
class CascadeParams:
    """Biexciton-exciton cascade timing.

    fss in micro-eV, t1_x and t1_xx in ps, t_rep in ns.
    """

    fss: float = 2.1
    t1_x: float = 171.0
    t1_xx: float = 120.0
    t_rep: float = 1000.0 / 305.0

    def __post_init__(self):
        for name in ("fss", "t1_x", "t1_xx", "t_rep"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CascadeParams.{name} must be strictly positive")

    @property
    def t_p(self) -> float:
        """FSS oscillation period h/FSS in ps."""
        return 1000.0 * H_UEV_NS / self.fss

    @property
    def omega(self) -> float:
        """Phase rotation rate FSS/hbar in rad/ps."""
        return self.fss / HBAR_UEV_NS / 1000.0

    @property
    def t_rep_ps(self) -> float:
        return 1000.0 * self.t_rep


def ket(amplitudes) -> np.ndarray:
    psi = np.asarray(amplitudes, dtype=complex).reshape(4)
    norm = np.linalg.norm(psi)
    if abs(norm**2 - 1.0) > 1e-9:
        raise ValueError(f"state vector not normalized (|psi|^2 = {norm**2:.12g})")
    return psi


def projector(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def bell_state(which: BellName) -> np.ndarray:
    s = 1 / np.sqrt(2)
    table = {
        "phi_plus": (s, 0, 0, s),
        "phi_minus": (s, 0, 0, -s),
        "psi_plus": (0, s, s, 0),
        "psi_minus": (0, s, -s, 0),
    }
    try:
        return np.array(table[which], dtype=complex)
    except KeyError:
        raise ValueError(f"unknown Bell state {which!r}") from None


BELL_NAMES: tuple[BellName, ...] = ("phi_plus", "phi_minus", "psi_plus", "psi_minus")


def cascade_phase(delay, params: CascadeParams):
    """Relative HH/VV phase accumulated after ``delay`` ps."""
    return params.omega * np.asarray(delay, dtype=float)


def cascade_state(delay: float, params: CascadeParams) -> np.ndarray:
    if delay < 0:
        raise ValueError("delay must be non-negative")
    s = 1 / np.sqrt(2)
    return np.array([s, 0, 0, s * np.exp(1j * cascade_phase(delay, params))], dtype=complex)


def cascade_density(delay: float, params: CascadeParams, coherence: float = 1.0) -> np.ndarray:
    """Density matrix of the cascade pair after ``delay`` ps.

    ``coherence`` scales the HH/VV coherences; 1 gives the pure state.
    """
    if delay < 0:
        raise ValueError("delay must be non-negative")
    phase = cascade_phase(delay, params)
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = rho[3, 3] = 0.5
    rho[0, 3] = 0.5 * coherence * np.exp(-1j * phase)
    rho[3, 0] = 0.5 * coherence * np.exp(1j * phase)
    return rho


def maximally_mixed() -> np.ndarray:
    return np.eye(4, dtype=complex) / 4


def mix_with_white_noise(rho: np.ndarray, noise_fraction: float) -> np.ndarray:
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValueError(f"noise_fraction must lie in [0, 1], got {noise_fraction}")
    return (1 - noise_fraction) * np.asarray(rho, dtype=complex) + noise_fraction * maximally_mixed()


def is_unitary(u: np.ndarray, atol: float = 1e-9) -> bool:
    u = np.asarray(u, dtype=complex)
    return u.shape[0] == u.shape[1] and np.allclose(u @ u.conj().T, np.eye(u.shape[0]), atol=atol, rtol=0)


def apply_local_unitary(rho: np.ndarray, u_a: np.ndarray, u_b: np.ndarray) -> np.ndarray:
    """Apply U_A (XX photon) and U_B (X photon) to a two-qubit state."""
    u_a = np.asarray(u_a, dtype=complex)
    u_b = np.asarray(u_b, dtype=complex)
    if u_a.shape != (2, 2) or u_b.shape != (2, 2) or not (is_unitary(u_a) and is_unitary(u_b)):
        raise ValueError("local operations must be 2x2 unitaries")
    u = np.kron(u_a, u_b)
    return u @ np.asarray(rho, dtype=complex) @ u.conj().T


def fidelity_to_state(rho: np.ndarray, target: np.ndarray) -> float:
    target = np.asarray(target, dtype=complex)
    value = target.conj() @ np.asarray(rho, dtype=complex) @ target
    if abs(value.imag) > 1e-9:
        raise ValueError("rho is not Hermitian: complex expectation value")
    return float(value.real)


def bell_fidelities(rho: np.ndarray) -> dict[str, float]:
    return {name: fidelity_to_state(rho, bell_state(name)) for name in BELL_NAMES}


def _clamped_eigh(rho: np.ndarray):
    w, v = np.linalg.eigh((rho + rho.conj().T) / 2)
    w = np.where((w < 0) & (w >= -PSD_CLAMP), 0.0, w)
    if w.min() < 0:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return w, v


def concurrence(rho: np.ndarray) -> float:
    """Wootters concurrence.

    The values lambda_i (square roots of the eigenvalues of rho * rho~) are
    obtained as singular values of W^T (sy x sy) W with rho = W W^dagger,
    which keeps them accurate to machine precision for pure states.
    """
    rho = np.asarray(rho, dtype=complex)
    w, v = _clamped_eigh(rho)
    weights = v * np.sqrt(w)
    lam = np.linalg.svd(weights.T @ _SYSY @ weights, compute_uv=False)
    lam = np.sort(lam)[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def concurrence_eig(rho: np.ndarray) -> float:
    """Concurrence straight from the eigenvalues of rho (sy x sy) rho* (sy x sy)."""
    rho = np.asarray(rho, dtype=complex)
    r = rho @ _SYSY @ rho.conj() @ _SYSY
    ev = np.linalg.eigvals(r).real
    ev = np.where((ev < 0) & (ev >= -PSD_CLAMP), 0.0, ev)
    lam = np.sort(np.sqrt(np.clip(ev, 0, None)))[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def purity(rho: np.ndarray) -> float:
    rho = np.asarray(rho, dtype=complex)
    return float(np.trace(rho @ rho).real)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = _clamped_eigh(np.asarray(m, dtype=complex))
    return (v * np.sqrt(w)) @ v.conj().T


def state_fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Uhlmann fidelity ||sqrt(rho) sqrt(sigma)||_1^2 (squared convention)."""
    sv = np.linalg.svd(_psd_sqrt(rho) @ _psd_sqrt(sigma), compute_uv=False)
    return float(np.sum(sv) ** 2)


def check_density_matrix(rho: np.ndarray, atol: float = 1e-9) -> None:
    """Raise ValueError unless rho is Hermitian, unit trace and PSD within atol."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) >= atol:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > atol:
        raise ValueError(f"density matrix trace is {np.trace(rho).real:.12g}")
    if np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() < -atol:
        raise ValueError("density matrix has a negative eigenvalue")


def is_density_matrix(rho: np.ndarray, atol: float = 1e-9) -> bool:
    try:
        check_density_matrix(rho, atol)
    except ValueError:
        return False
    return True


def su2(theta: float, phi: float, lam: float) -> np.ndarray:
    """Single-qubit unitary from three Euler angles (ZYZ convention)."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array(
        [
            [c, -np.exp(1j * lam) * s],
            [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c],
        ],
        dtype=complex,
    )


def random_unitary(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    """Haar-random unitary via QR of a complex Ginibre matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_density_matrix(rng: np.random.Generator, rank: int = 4) -> np.ndarray:
    g = rng.standard_normal((4, rank)) + 1j * rng.standard_normal((4, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real
