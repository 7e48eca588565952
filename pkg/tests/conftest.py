import sys

import numpy as np
import pytest
from scipy.linalg import expm

from fscvqkd.gaussian import symplectic_form


def random_physical_cm(rng: np.random.Generator, n: int, max_nu: float = 5.0) -> np.ndarray:
    """Random physical covariance matrix ``S^T diag(nu) S`` with symplectic ``S``."""
    omega = symplectic_form(n)
    h = rng.normal(size=(2 * n, 2 * n)) * 0.4
    s = expm(omega @ (h + h.T) / 2)
    nu = np.repeat(1 + rng.uniform(0, max_nu - 1, n), 2)
    m = s.T @ np.diag(nu) @ s
    return (m + m.T) / 2


def oracle_symplectic(m: np.ndarray) -> np.ndarray:
    """Moduli of the eigenvalues of ``i Omega M``, one per conjugate pair."""
    n = m.shape[0] // 2
    ev = np.sort(np.abs(np.linalg.eigvals(1j * symplectic_form(n) @ m)))[::-1]
    return ev[::2]


def oracle_entropy(m: np.ndarray) -> float:
    total = 0.0
    for nu in oracle_symplectic(m):
        x = max((nu - 1) / 2, 0.0)
        if x > 0:
            total += (x + 1) * np.log2(x + 1) - x * np.log2(x)
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])


def mc_conditional(m: np.ndarray, mode: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample estimate of the covariance left after heterodyning ``mode``, with standard errors."""
    dim = m.shape[0]
    x = rng.multivariate_normal(np.zeros(dim), m, size=n)
    idx = [2 * mode, 2 * mode + 1]
    rest = [i for i in range(dim) if i not in idx]
    y = x[:, idx] + rng.normal(size=(n, 2))  # heterodyne adds one unit of vacuum noise
    coef, *_ = np.linalg.lstsq(y, x[:, rest], rcond=None)
    r = x[:, rest] - y @ coef
    prod = r[:, :, None] * r[:, None, :]
    return prod.mean(axis=0), prod.std(axis=0) / np.sqrt(n)


def conditioning_z_scores(n_states: int, samples: int, seed: int) -> np.ndarray:
    """|library - Monte Carlo| / SE over the unique entries of ``n_states`` random 3-mode states."""
    from fscvqkd.gaussian import CovarianceMatrix, condition_on_heterodyne

    states = np.random.default_rng(seed)
    draws = np.random.default_rng(seed + 1)
    iu = np.triu_indices(4)
    out = []
    for i in range(n_states):
        cm = CovarianceMatrix(random_physical_cm(states, 3, max_nu=3.0), ("X", "Y", "Z"))
        got = condition_on_heterodyne(cm, cm.labels[i % 3]).matrix
        est, se = mc_conditional(cm.matrix, i % 3, samples, draws)
        out.append((np.abs(got - est) / se)[iu])
    return np.concatenate(out)
