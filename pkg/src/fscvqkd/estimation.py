"""Parameter estimation for the effective channel.

Bob's heterodyne outcome is modelled as ``B = t A + n`` with
``t = sqrt(eta_B eta_f / 2)`` and noise variance
``sigma^2 = 1 + nu_B + eta_B eta_f xi_f / 2``. The maximum-likelihood
estimators of ``t`` and ``sigma^2``, together with a shot-noise
calibration, give interval estimates of ``(eta_f, xi_f)``.

Data can be materialised as a :class:`QuadratureBatch`, or summarised by
:class:`RegressionStats` when ``k`` is too large to hold in memory. Both
paths feed the same interval formulas.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import erfcinv

from .gaussian import DetectorModel


class EstimationError(ValueError):
    """Data are insufficient for the requested estimator."""


def z_quantile(eps: float) -> float:
    """Two-sided Gaussian quantile ``z`` with ``erfc(z / sqrt(2)) = eps``."""
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    return float(math.sqrt(2) * erfcinv(eps))


@dataclass(frozen=True)
class QuadratureBatch:
    """Revealed quadrature data.

    ``a`` holds Alice's values and ``b`` Bob's. A shot-noise batch has
    ``a = None`` and ``b`` holding the no-signal samples ``B_0``.
    """

    b: np.ndarray
    a: np.ndarray | None = None

    def __post_init__(self) -> None:
        b = np.array(self.b, dtype=float).ravel()
        if not np.all(np.isfinite(b)):
            raise ValueError("quadrature values must be finite")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)
        if self.a is not None:
            a = np.array(self.a, dtype=float).ravel()
            if a.shape != b.shape:
                raise ValueError(f"a and b differ in length: {a.size} vs {b.size}")
            if not np.all(np.isfinite(a)):
                raise ValueError("quadrature values must be finite")
            a.setflags(write=False)
            object.__setattr__(self, "a", a)

    @property
    def k(self) -> int:
        return int(self.b.size)

    @property
    def is_shot_noise(self) -> bool:
        return self.a is None


@dataclass(frozen=True)
class RegressionStats:
    """Sufficient statistics of a regression batch."""

    k: int
    sum_aa: float
    t_hat: float
    rss: float


@dataclass(frozen=True)
class Estimate:
    value: float
    halfwidth: float
    eps: float

    def __post_init__(self) -> None:
        if not self.halfwidth >= 0:
            raise ValueError(f"halfwidth must be >= 0, got {self.halfwidth}")

    @property
    def lower(self) -> float:
        return self.value - self.halfwidth

    @property
    def upper(self) -> float:
        return self.value + self.halfwidth

    def covers(self, x: float) -> bool:
        return self.lower <= x <= self.upper


@dataclass(frozen=True)
class EstimatedChannel:
    """Interval estimates of ``(eta_f, xi_f)``.

    ``xi_clamped`` is set when the raw excess-noise estimate was negative
    and has been replaced by 0.
    """

    eta_f: Estimate
    xi_f: Estimate
    eta_B: Estimate
    xi_clamped: bool = False


def regression_stats(batch: QuadratureBatch) -> RegressionStats:
    if batch.a is None:
        raise EstimationError("regression needs Alice's data")
    if batch.k < 2:
        raise EstimationError(f"need at least 2 pairs, got {batch.k}")
    a, b = batch.a, batch.b
    sum_aa = float(a @ a)
    if sum_aa <= 0:
        raise EstimationError("Alice's data are all zero")
    t_hat = float(a @ b) / sum_aa
    resid = b - t_hat * a
    return RegressionStats(k=batch.k, sum_aa=sum_aa, t_hat=t_hat, rss=float(resid @ resid))


def mle_from_stats(s: RegressionStats, eps_PE: float) -> tuple[Estimate, Estimate]:
    if s.k < 2 or s.sum_aa <= 0:
        raise EstimationError("degenerate regression statistics")
    z = z_quantile(eps_PE)
    sigma2 = s.rss / s.k
    dt = z * math.sqrt(sigma2 / s.sum_aa)
    ds = z * sigma2 * math.sqrt(2) / math.sqrt(s.k)
    return Estimate(s.t_hat, dt, eps_PE), Estimate(sigma2, ds, eps_PE)


def mle_linear(batch: QuadratureBatch, eps_PE: float) -> tuple[Estimate, Estimate]:
    """Estimates of ``t`` and ``sigma^2`` with their confidence intervals."""
    return mle_from_stats(regression_stats(batch), eps_PE)


def shot_noise_from_stats(sum_sq: float, n: int, eps_PE: float) -> Estimate:
    if n < 1:
        raise EstimationError("shot-noise batch is empty")
    s0 = sum_sq / n
    return Estimate(s0, z_quantile(eps_PE) * s0 * math.sqrt(2) / math.sqrt(n), eps_PE)


def shot_noise_estimate(batch0: QuadratureBatch, eps_PE: float) -> Estimate:
    """Estimate of Bob's shot-noise variance from no-signal samples."""
    b = batch0.b
    return shot_noise_from_stats(float(b @ b), b.size, eps_PE)


def effective_channel_estimate(t: Estimate, sigma2: Estimate, sigma0: Estimate,
                               eta_B: Estimate) -> EstimatedChannel:
    """Propagate regression and calibration intervals to ``(eta_f, xi_f)``."""
    if eta_B.value <= 0:
        raise EstimationError("detector-efficiency estimate must be positive")
    eps = max(t.eps, sigma2.eps, sigma0.eps)
    eta_f = 2 * t.value ** 2 / eta_B.value
    if eta_f <= 0:
        raise EstimationError("transmissivity estimate is zero")
    rel_B = abs(eta_B.halfwidth / eta_B.value)
    d_eta = eta_f * (abs(2 * t.halfwidth / t.value) + rel_B)
    scale = eta_f * eta_B.value
    xi = 2 * (sigma2.value - sigma0.value) / scale
    clamped = xi < 0
    xi = max(xi, 0.0)
    # same as the relative-error sum, written so it stays finite at xi = 0
    d_xi = 2 * (sigma2.halfwidth + sigma0.halfwidth) / scale + xi * (rel_B + d_eta / eta_f)
    return EstimatedChannel(Estimate(eta_f, d_eta, eps), Estimate(xi, d_xi, eps), eta_B, clamped)


def worst_case(ec: EstimatedChannel,
               eve_info: Callable[[float, float], float] | None = None) -> tuple[float, float]:
    """Worst-case ``(eta_f, xi_f)`` for Eve's information.

    By default the corner with low transmissivity and high noise. When
    ``eve_info`` is given, it is maximised over the confidence box: the four
    corners are evaluated, and along each noise edge an interior maximum in
    transmissivity is located when the endpoint slopes bracket one.
    """
    lo = min(max(ec.eta_f.lower, 0.0), 1.0)
    hi = min(max(ec.eta_f.upper, 0.0), 1.0)
    xlo = max(ec.xi_f.lower, 0.0)
    xhi = max(ec.xi_f.upper, 0.0)
    if eve_info is None:
        return lo, xhi
    corners = [(lo, xhi), (lo, xlo), (hi, xhi), (hi, xlo)]
    values = [eve_info(e, x) for e, x in corners]
    if hi > lo:
        h = 1e-6 * (hi - lo)
        for x, f_lo, f_hi in ((xhi, values[0], values[2]), (xlo, values[1], values[3])):
            if eve_info(lo + h, x) > f_lo and eve_info(hi - h, x) > f_hi:
                res = minimize_scalar(lambda e: -eve_info(e, x), bounds=(lo, hi),
                                      method="bounded", options={"xatol": 1e-12})
                corners.append((float(res.x), x))
                values.append(-float(res.fun))
            if xhi == xlo:
                break
    return corners[int(np.argmax(values))]


def _noise_variance(eta_f: float, xi_f: float, det: DetectorModel) -> float:
    return 1 + det.nu_B + det.eta_B * eta_f * xi_f / 2


def subchannel_estimate(s: RegressionStats, eps_PE: float, eta_B: Estimate) -> Estimate:
    """Transmissivity estimate of one sub-channel from its revealed data."""
    t, _ = mle_from_stats(s, eps_PE)
    if t.value == 0:
        raise EstimationError("sub-channel regression slope is zero")
    eta = 2 * t.value ** 2 / eta_B.value
    d = eta * (abs(2 * t.halfwidth / t.value) + abs(eta_B.halfwidth / eta_B.value))
    return Estimate(eta, d, eps_PE)


def subchannel_transmissivity_min(batch_s: QuadratureBatch, eps_PE: float,
                                  eta_B: Estimate) -> float:
    """Lower confidence limit ``eta_hat - Delta(eta)`` of a sub-channel."""
    return subchannel_estimate(regression_stats(batch_s), eps_PE, eta_B).lower


def sample_subchannel_minima(eta: np.ndarray, xi: np.ndarray, V_A: float, det: DetectorModel,
                             k_s: int, eps_PE: float, rng: np.random.Generator,
                             eta_B: Estimate | None = None) -> np.ndarray:
    """Simulated ``eta_min`` for many sub-channels at once, one batch of ``k_s`` each."""
    if k_s < 2:
        raise EstimationError(f"need at least 2 pairs per sub-channel, got {k_s}")
    if V_A <= 0:
        raise EstimationError("V_A must be positive")
    eta_B = eta_B or Estimate(det.eta_B, 0.0, eps_PE)
    eta = np.asarray(eta, dtype=float)
    t = np.sqrt(det.eta_B * eta / 2)
    s2 = 1 + det.nu_B + det.eta_B * eta * np.asarray(xi, dtype=float) / 2
    sum_aa = V_A * rng.chisquare(k_s, eta.size)
    t_hat = rng.normal(t, np.sqrt(s2 / sum_aa))
    s2_hat = s2 * rng.chisquare(k_s - 1, eta.size) / k_s
    dt = z_quantile(eps_PE) * np.sqrt(s2_hat / sum_aa)
    est = 2 * t_hat ** 2 / eta_B.value
    with np.errstate(divide="ignore", invalid="ignore"):
        d = est * (np.abs(2 * dt / t_hat) + abs(eta_B.halfwidth / eta_B.value))
    return np.where(t_hat == 0, -np.inf, est - d)


def simulate_quadratures(eta_f: float, xi_f: float, V_A: float, det: DetectorModel,
                         k: int, seed=None) -> QuadratureBatch:
    """Synthetic revealed data for an effective channel."""
    if V_A < 0:
        raise ValueError(f"V_A must be >= 0, got {V_A}")
    rng = np.random.default_rng(seed)
    t = math.sqrt(det.eta_B * eta_f / 2)
    a = rng.normal(0.0, math.sqrt(V_A), k) if V_A > 0 else np.zeros(k)
    b = t * a + rng.normal(0.0, math.sqrt(_noise_variance(eta_f, xi_f, det)), k)
    return QuadratureBatch(b=b, a=a)


def simulate_shot_noise(det: DetectorModel, n: int, seed=None) -> QuadratureBatch:
    rng = np.random.default_rng(seed)
    return QuadratureBatch(b=rng.normal(0.0, math.sqrt(1 + det.nu_B), n))


def sample_regression_stats(eta_f: float, xi_f: float, V_A: float, det: DetectorModel,
                            k: int, rng: np.random.Generator) -> RegressionStats:
    """Draw sufficient statistics with the exact sampling law of a batch of size ``k``.

    ``sum A^2 / V_A`` is chi-square with ``k`` degrees of freedom, the slope
    is Gaussian given it, and the residual sum is an independent scaled
    chi-square with ``k - 1`` degrees of freedom.
    """
    if k < 2:
        raise EstimationError(f"need at least 2 pairs, got {k}")
    if V_A <= 0:
        raise EstimationError("V_A must be positive")
    t = math.sqrt(det.eta_B * eta_f / 2)
    s2 = _noise_variance(eta_f, xi_f, det)
    sum_aa = V_A * rng.chisquare(k)
    t_hat = rng.normal(t, math.sqrt(s2 / sum_aa))
    rss = s2 * rng.chisquare(k - 1)
    return RegressionStats(k=k, sum_aa=float(sum_aa), t_hat=float(t_hat), rss=float(rss))


def sample_channel_estimate(eta_f: float, xi_f: float, V_A: float, det: DetectorModel,
                            k: int, eps_PE: float, rng: np.random.Generator,
                            n_shot: int | None = None,
                            eta_B: Estimate | None = None) -> EstimatedChannel:
    """Simulated estimate at any ``k`` without materialising the data."""
    n_shot = k if n_shot is None else n_shot
    eta_B = eta_B or Estimate(det.eta_B, 0.0, eps_PE)
    t, s2 = mle_from_stats(sample_regression_stats(eta_f, xi_f, V_A, det, k, rng), eps_PE)
    s0 = (1 + det.nu_B) * rng.chisquare(n_shot)
    return effective_channel_estimate(t, s2, shot_noise_from_stats(s0, n_shot, eps_PE), eta_B)


def analytic_error_bars(eta_f: float, xi_f: float, V_A: float, det: DetectorModel,
                        k: float, eps_PE: float, n_shot: float | None = None,
                        eta_B: Estimate | None = None) -> EstimatedChannel:
    """Interval estimates with every sum replaced by its expectation.

    Point estimates equal the true parameters. ``n_shot`` is the size of the
    shot-noise calibration (defaults to ``k``).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if V_A <= 0:
        raise ValueError(f"V_A must be positive, got {V_A}")
    n_shot = k if n_shot is None else n_shot
    eta_B = eta_B or Estimate(det.eta_B, 0.0, eps_PE)
    z = z_quantile(eps_PE)
    s2 = _noise_variance(eta_f, xi_f, det)
    s0 = 1 + det.nu_B
    t = Estimate(math.sqrt(det.eta_B * eta_f / 2), z * math.sqrt(s2 / (k * V_A)), eps_PE)
    sigma2 = Estimate(s2, z * s2 * math.sqrt(2 / k), eps_PE)
    sigma0 = Estimate(s0, z * s0 * math.sqrt(2 / n_shot), eps_PE)
    ec = effective_channel_estimate(t, sigma2, sigma0, eta_B)
    # report the exact inputs rather than their round-tripped values
    return EstimatedChannel(Estimate(eta_f, ec.eta_f.halfwidth, ec.eta_f.eps),
                            Estimate(xi_f, ec.xi_f.halfwidth, ec.xi_f.eps), eta_B, False)


def save_batch(batch: QuadratureBatch, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if batch.a is None:
            w.writerow(["b0"])
            w.writerows([f"{v:.12g}"] for v in batch.b)
        else:
            w.writerow(["a", "b"])
            w.writerows([f"{x:.12g}", f"{y:.12g}"] for x, y in zip(batch.a, batch.b))


def load_batch(path: str | Path) -> QuadratureBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty batch file")
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    if header == ["b0"]:
        return QuadratureBatch(b=data[:, 0])
    if header == ["a", "b"]:
        return QuadratureBatch(b=data[:, 1], a=data[:, 0])
    raise ValueError(f"{path}: unknown batch columns {header}")
