"""Covariance-matrix algebra for Gaussian states.

Quadratures are interleaved per mode, ``(q1, p1, q2, p2, ...)``, with the
symplectic form ``Omega = diag([[0, 1], [-1, 0]], ...)``. All matrices are in
shot-noise units, so the vacuum has covariance ``I``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PHYSICAL_TOL = 1e-9
SYMMETRY_RTOL = 1e-12

I2 = np.eye(2)
Z2 = np.diag([1.0, -1.0])


class InvalidMatrixError(ValueError):
    """Raised for non-symmetric, non-positive or unphysical covariance matrices."""


def symplectic_form(n: int) -> np.ndarray:
    return np.kron(np.eye(n), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def _check_square_even(m: np.ndarray) -> int:
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2:
        raise InvalidMatrixError(f"expected a 2n x 2n matrix, got shape {m.shape}")
    return m.shape[0] // 2


def _check_symmetric(m: np.ndarray) -> None:
    scale = max(float(np.max(np.abs(m))), 1.0)
    if np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * scale:
        raise InvalidMatrixError("covariance matrix is not symmetric")


def _spectrum(m: np.ndarray) -> np.ndarray:
    """Symplectic spectrum of a symmetric positive-definite matrix, descending.

    Uses the Hermitian matrix ``i * M^(1/2) Omega M^(1/2)``, whose eigenvalues
    come in pairs ``+nu_k, -nu_k``.
    """
    n = _check_square_even(m)
    w, u = np.linalg.eigh(m)
    if w[0] <= 0:
        raise InvalidMatrixError("covariance matrix is not positive definite")
    root = (u * np.sqrt(w)) @ u.T
    k = root @ symplectic_form(n) @ root
    herm = 1j * (k - k.T) / 2
    ev = np.linalg.eigvalsh(herm)
    return np.sort(ev[n:])[::-1]


@dataclass(frozen=True)
class CovarianceMatrix:
    """Covariance matrix of an n-mode zero-mean Gaussian state.

    Construction validates symmetry, positive definiteness and the
    uncertainty principle (all symplectic eigenvalues >= 1).
    """

    matrix: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float)
        n = _check_square_even(m)
        _check_symmetric(m)
        m = (m + m.T) / 2
        labels = tuple(self.labels) if self.labels else tuple(f"m{i}" for i in range(n))
        if len(labels) != n:
            raise InvalidMatrixError(f"{len(labels)} labels for {n} modes")
        if len(set(labels)) != n:
            raise InvalidMatrixError(f"duplicate mode labels {labels}")
        nu = _spectrum(m)
        if nu[-1] < 1 - PHYSICAL_TOL:
            raise InvalidMatrixError(
                f"unphysical covariance matrix: smallest symplectic eigenvalue {nu[-1]:.3g} < 1"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "labels", labels)

    @property
    def n_modes(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"no mode {label!r} in {self.labels}") from None

    def block(self, a: str, b: str | None = None) -> np.ndarray:
        """2x2 block between modes ``a`` and ``b`` (``b`` defaults to ``a``)."""
        i = 2 * self.index(a)
        j = 2 * self.index(b if b is not None else a)
        return self.matrix[i:i + 2, j:j + 2].copy()

    def reduced(self, modes: Sequence[str]) -> "CovarianceMatrix":
        idx = _quadrature_indices([self.index(x) for x in modes])
        return CovarianceMatrix(self.matrix[np.ix_(idx, idx)], tuple(modes))


def _quadrature_indices(mode_idx: Sequence[int]) -> list[int]:
    return [q for i in mode_idx for q in (2 * i, 2 * i + 1)]


def direct_sum(*cms: CovarianceMatrix) -> CovarianceMatrix:
    size = sum(c.matrix.shape[0] for c in cms)
    out = np.zeros((size, size))
    pos = 0
    for c in cms:
        d = c.matrix.shape[0]
        out[pos:pos + d, pos:pos + d] = c.matrix
        pos += d
    return CovarianceMatrix(out, tuple(x for c in cms for x in c.labels))


def g_entropy(x: float) -> float:
    """Bosonic entropy function ``(x+1) log2(x+1) - x log2(x)`` in bits."""
    if x < 0:
        raise ValueError(f"g_entropy needs x >= 0, got {x}")
    if x == 0:
        return 0.0
    return (x + 1) * math.log2(x + 1) - x * math.log2(x)


def symplectic_eigenvalues(m: CovarianceMatrix | np.ndarray) -> np.ndarray:
    """Symplectic eigenvalues in descending order."""
    if isinstance(m, CovarianceMatrix):
        return _spectrum(m.matrix)
    arr = np.asarray(m, dtype=float)
    _check_square_even(arr)
    _check_symmetric(arr)
    return _spectrum((arr + arr.T) / 2)


def von_neumann_entropy(m: CovarianceMatrix | np.ndarray) -> float:
    """Entropy in bits, summing ``G((nu - 1) / 2)`` over the symplectic spectrum."""
    nu = np.maximum(symplectic_eigenvalues(m), 1.0)
    return float(sum(g_entropy((v - 1) / 2) for v in nu))


@dataclass(frozen=True)
class DetectorModel:
    """Heterodyne detector with efficiency ``eta_B`` and electronic noise ``nu_B``.

    The detector is a beam splitter of transmissivity ``eta_B`` whose other
    port is one half of an EPR state of variance ``upsilon``.
    """

    eta_B: float = 1.0
    nu_B: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.eta_B <= 1:
            raise ValueError(f"eta_B must lie in (0, 1], got {self.eta_B}")
        if self.nu_B < 0:
            raise ValueError(f"nu_B must be >= 0, got {self.nu_B}")
        if self.eta_B == 1 and self.nu_B > 0:
            raise ValueError("electronic noise needs eta_B < 1 in the beam-splitter model")

    @property
    def upsilon(self) -> float:
        if self.eta_B == 1:
            return 1.0
        return 1 + 2 * self.nu_B / (1 - self.eta_B)

    @property
    def chi_het(self) -> float:
        """Detection noise referred to the channel input."""
        return (1 + (1 - self.eta_B) + 2 * self.nu_B) / self.eta_B


def two_mode_squeezed(V: float, labels: tuple[str, str] = ("A", "B0")) -> CovarianceMatrix:
    if V < 1:
        raise ValueError(f"quadrature variance must be >= 1, got {V}")
    c = math.sqrt(V * V - 1)
    return CovarianceMatrix(np.block([[V * I2, c * Z2], [c * Z2, V * I2]]), labels)


def build_state_cm(V: float, eta: float, xi: float) -> CovarianceMatrix:
    """Alice-Bob covariance matrix after a lossy, noisy channel.

    Alice's mode keeps variance ``V``; Bob's mode has variance
    ``eta (V - 1) + eta xi + 1`` and the correlation is ``sqrt(eta (V^2 - 1))``.
    """
    if V < 1:
        raise ValueError(f"quadrature variance must be >= 1, got {V}")
    if not 0 <= eta <= 1:
        raise ValueError(f"transmissivity must lie in [0, 1], got {eta}")
    if xi < 0:
        raise ValueError(f"excess noise must be >= 0, got {xi}")
    c = math.sqrt(eta) * math.sqrt(V * V - 1)
    vb = eta * (V - 1) + eta * xi + 1
    return CovarianceMatrix(np.block([[V * I2, c * Z2], [c * Z2, vb * I2]]), ("A", "B1"))


def beam_splitter(eta: float) -> np.ndarray:
    s, r = math.sqrt(eta), math.sqrt(1 - eta)
    return np.block([[s * I2, r * I2], [-r * I2, s * I2]])


def permutation_matrix(order: Sequence[int]) -> np.ndarray:
    """Matrix ``P`` with ``P @ M @ P.T`` listing modes in ``order``."""
    idx = _quadrature_indices(order)
    p = np.zeros((len(idx), len(idx)))
    p[np.arange(len(idx)), idx] = 1.0
    return p


def assemble_measurement_cm(m_ab1: CovarianceMatrix, det: DetectorModel) -> CovarianceMatrix:
    """Four-mode state ``(A, F, G, B2)`` behind Bob's noisy detector.

    ``B1`` and ``F0`` are mixed on the detector beam splitter; the outputs
    are the measured mode ``B2`` and the lost mode ``F``.
    """
    if m_ab1.n_modes != 2:
        raise InvalidMatrixError(f"expected a two-mode state, got {m_ab1.n_modes} modes")
    epr = two_mode_squeezed(det.upsilon, ("F0", "G"))
    total = direct_sum(CovarianceMatrix(m_ab1.matrix, ("A", "B1")), epr).matrix
    s = np.eye(8)
    s[2:6, 2:6] = beam_splitter(det.eta_B)
    mixed = s.T @ total @ s
    # after mixing the order is (A, B2, F, G)
    p = permutation_matrix([0, 2, 3, 1])
    return CovarianceMatrix(p @ mixed @ p.T, ("A", "F", "G", "B2"))


def condition_on_heterodyne(m: CovarianceMatrix, mode: str) -> CovarianceMatrix:
    """Covariance of the remaining modes after heterodyning ``mode``."""
    k = m.index(mode)
    rest = [i for i in range(m.n_modes) if i != k]
    ri = _quadrature_indices(rest)
    ki = _quadrature_indices([k])
    a = m.matrix[np.ix_(ri, ri)]
    sigma = m.matrix[np.ix_(ri, ki)]
    b = m.matrix[np.ix_(ki, ki)] + I2
    if abs(np.linalg.det(b)) < 1e-300:
        raise InvalidMatrixError("singular heterodyne conditioning block")
    cond = a - sigma @ np.linalg.solve(b, sigma.T)
    return CovarianceMatrix((cond + cond.T) / 2, tuple(m.labels[i] for i in rest))
