"""Information quantities and key lengths for the no-switching protocol.

All information terms are in bits per symbol and use reverse
reconciliation with heterodyne detection on both sides. Bob's detector
noise is trusted, i.e. not accessible to the eavesdropper.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal

from .gaussian import (
    DetectorModel,
    assemble_measurement_cm,
    build_state_cm,
    condition_on_heterodyne,
    von_neumann_entropy,
)

Attack = Literal["collective", "individual"]
Regime = Literal["asymptotic", "finite"]
ATTACKS: tuple[str, ...] = ("collective", "individual")
REGIMES: tuple[str, ...] = ("asymptotic", "finite")


class DegenerateChannelError(ValueError):
    """Zero transmissivity: no correlation survives the channel."""


def _check_channel(eta_f: float, xi_f: float, V: float) -> None:
    if not 0 < eta_f <= 1:
        raise DegenerateChannelError(f"eta_f must lie in (0, 1], got {eta_f}")
    if xi_f < 0:
        raise ValueError(f"xi_f must be >= 0, got {xi_f}")
    if V < 1:
        raise ValueError(f"V must be >= 1, got {V}")


def bob_variance(eta_f: float, xi_f: float, V: float, det: DetectorModel) -> float:
    """Variance of mode B2 just before Bob's heterodyne measurement."""
    return det.eta_B * (eta_f * (V - 1) + eta_f * xi_f + 1) + (1 - det.eta_B) * det.upsilon


def mutual_information(eta_f: float, xi_f: float, V: float, det: DetectorModel) -> float:
    """Alice-Bob mutual information ``I(a:b)``."""
    _check_channel(eta_f, xi_f, V)
    v_b = (bob_variance(eta_f, xi_f, V, det) + 1) / 2
    chi_tot = xi_f - 1 + 1 / eta_f + det.chi_het / eta_f
    v_ba = det.eta_B * eta_f * (1 + chi_tot) / 2
    return max(math.log2(v_b / v_ba), 0.0)


def holevo_bound(eta_f: float, xi_f: float, V: float, det: DetectorModel) -> float:
    """Eve's Holevo information ``chi(b:E)`` from the covariance-matrix pipeline."""
    _check_channel(eta_f, xi_f, V)
    m_ab1 = build_state_cm(V, eta_f, xi_f)
    cond = condition_on_heterodyne(assemble_measurement_cm(m_ab1, det), "B2")
    return max(von_neumann_entropy(m_ab1) - von_neumann_entropy(cond), 0.0)


def individual_information(eta_f: float, xi_f: float, V: float, det: DetectorModel) -> float:
    """Eve's Shannon information ``I(b:E)`` for the optimal individual attack."""
    _check_channel(eta_f, xi_f, V)
    v_b = (bob_variance(eta_f, xi_f, V, det) + 1) / 2
    denom = (math.sqrt(2 - 2 * eta_f + eta_f * xi_f) + math.sqrt(xi_f)) ** 2
    if denom == 0:
        # lossless noiseless limit: Eve's conditioning variable is uninformative
        v_be = det.eta_B * (V + det.chi_het) / 2
    else:
        x_e = eta_f * (2 - xi_f) ** 2 / denom + 1
        v_be = det.eta_B * ((V * x_e + 1) / (V + x_e) + det.chi_het) / 2
    return max(math.log2(v_b / v_be), 0.0)


def eve_information(attack: str, eta_f: float, xi_f: float, V: float,
                    det: DetectorModel) -> float:
    if attack == "collective":
        return holevo_bound(eta_f, xi_f, V, det)
    if attack == "individual":
        return individual_information(eta_f, xi_f, V, det)
    raise ValueError(f"unknown attack {attack!r}")


@dataclass(frozen=True)
class ProtocolParams:
    """Protocol settings.

    ``V_A`` is the modulation variance, ``reveal_fraction`` the share ``c``
    of the ``N`` signals disclosed for parameter estimation.
    """

    V_A: float = 2.0
    detector: DetectorModel = field(default_factory=DetectorModel)
    beta: float = 0.98
    d: int = 5
    N: float = 1e10
    reveal_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not self.V_A >= 0:
            raise ValueError(f"V_A must be >= 0, got {self.V_A}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if not 0 <= self.reveal_fraction < 1:
            raise ValueError(f"reveal_fraction must lie in [0, 1), got {self.reveal_fraction}")
        if self.N_key < 1:
            raise ValueError(f"N = {self.N} leaves no signal for the key")

    @property
    def V(self) -> float:
        return self.V_A + 1

    @property
    def k(self) -> float:
        return self.reveal_fraction * self.N

    @property
    def N_key(self) -> float:
        return self.N - self.k

    def with_modulation(self, V_A: float) -> "ProtocolParams":
        return replace(self, V_A=V_A)


@dataclass(frozen=True)
class SecurityBudget:
    """Composable security parameters; ``eps = 2 eps_sm + eps_bar + eps_PE + eps_cor``."""

    eps: float
    eps_PE: float
    eps_sm: float
    eps_cor: float
    eps_bar: float

    def __post_init__(self) -> None:
        parts = (self.eps_PE, self.eps_sm, self.eps_cor, self.eps_bar)
        if min(parts) <= 0 or self.eps <= 0:
            raise ValueError("all security parameters must be positive")
        total = 2 * self.eps_sm + self.eps_bar + self.eps_PE + self.eps_cor
        if not math.isclose(total, self.eps, rel_tol=1e-12):
            raise ValueError(f"budget does not add up: {total!r} != {self.eps!r}")

    def scaled(self, p: float) -> "SecurityBudget":
        """Budget with every component multiplied by ``p``."""
        return SecurityBudget(self.eps * p, self.eps_PE * p, self.eps_sm * p,
                              self.eps_cor * p, self.eps_bar * p)


def budget_split(eps_total: float, eps_PE: float) -> SecurityBudget:
    """Split ``eps_total - eps_PE`` equally over ``eps_sm, eps_bar, eps_cor``."""
    if not 0 < eps_PE < eps_total:
        raise ValueError(f"need 0 < eps_PE < eps_total, got {eps_PE}, {eps_total}")
    part = (eps_total - eps_PE) / 4
    return SecurityBudget(eps_total, eps_PE, part, part, part)


def delta_aep(N_prime: float, d: int, eps_sm: float, eps: float) -> float:
    """Finite-size penalty of the asymptotic equipartition bound."""
    if N_prime < 1 or eps_sm <= 0 or eps <= 0:
        raise ValueError("delta_aep needs N' >= 1 and positive epsilons")
    return ((d + 1) ** 2
            + 4 * (d + 1) * math.sqrt(math.log2(2 / eps_sm ** 2))
            + 2 * math.log2(2 / (eps ** 2 * eps_sm))
            + 4 * eps_sm * d / (eps * math.sqrt(N_prime)))


@dataclass(frozen=True)
class KeyRateResult:
    """One evaluated scenario.

    ``rate`` is clamped at 0; ``raw_rate`` keeps the signed value for
    plotting and optimisation.
    """

    regime: str
    attack: str
    strategy: str
    key_length: float
    rate: float
    raw_rate: float
    secure: bool
    V_A: float
    eta_f: float = math.nan
    xi_f: float = math.nan
    eta_f_wc: float = math.nan
    xi_f_wc: float = math.nan
    extras: dict[str, Any] = field(default_factory=dict, compare=False)


def finite_key_length(pp: ProtocolParams, sb: SecurityBudget, I_ab: float, eve_info: float,
                      N_used: float, N_total: float | None = None) -> tuple[float, float]:
    """Signed key length and rate ``ell / N_total`` for ``N_used`` key symbols."""
    if N_used < 1:
        raise ValueError(f"N_used must be >= 1, got {N_used}")
    N_total = pp.N if N_total is None else N_total
    ell = (N_used * (pp.beta * I_ab - eve_info)
           - math.sqrt(N_used) * delta_aep(N_used, pp.d, sb.eps_sm, sb.eps)
           - 2 * math.log2(1 / (2 * sb.eps_bar)))
    return ell, ell / N_total


def finite_result(pp: ProtocolParams, sb: SecurityBudget, I_ab: float, eve_info: float,
                  N_used: float, N_total: float | None = None, *, attack: str = "collective",
                  strategy: str = "baseline", **echo: Any) -> KeyRateResult:
    ell, raw = finite_key_length(pp, sb, I_ab, eve_info, N_used, N_total)
    secure = ell > 0
    return KeyRateResult("finite", attack, strategy, max(ell, 0.0), raw if secure else 0.0,
                         raw, secure, pp.V_A, **echo)


def asymptotic_rate(I_ab: float, eve_info: float, beta: float) -> float:
    """Asymptotic key rate ``max(beta I - eve_info, 0)``."""
    return max(beta * I_ab - eve_info, 0.0)


def general_attack_epsilon(eps: float, N_prime: float) -> tuple[float, bool]:
    """Indicative security parameter against general attacks, ``eps * N'^4``.

    The constant of the scaling is unknown, so the value is only
    indicative. The flag is false when it exceeds 1 and carries no meaning.
    """
    if eps <= 0 or N_prime <= 0:
        raise ValueError("eps and N' must be positive")
    value = eps * N_prime ** 4
    return value, value <= 1
