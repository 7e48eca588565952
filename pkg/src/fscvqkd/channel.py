"""Atmospheric fading channel: elliptic-beam sampling and ensemble statistics.

Transmissivities are sampled from the elliptic-beam model for weak
turbulence, then reduced to the effective parameters ``(eta_f, xi_f)`` of
the Gaussian channel sharing the ensemble-average covariance matrix.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from . import kernels

ENSEMBLE_FORMAT = "fscvqkd-ensemble v1"

ExcessNoise = Union[float, Callable[[np.ndarray], np.ndarray]]


class EmptySelectionError(ValueError):
    """No sub-channel falls inside the requested transmissivity range."""


class DegenerateChannelError(ValueError):
    """Effective transmissivity is zero."""


@dataclass(frozen=True)
class TurbulenceParams:
    """Link optics and turbulence strength.

    Lengths are in metres and ``cn2`` in m^(-2/3). ``attenuation_db`` is the
    deterministic extinction loss applied on top of the aperture loss.
    """

    wavelength: float = 809e-9
    w0: float = 0.02
    aperture: float = 0.04
    cn2: float = 1.5e-14
    distance: float = 1500.0
    attenuation_db: float = 1.25

    def __post_init__(self) -> None:
        for name in ("wavelength", "w0", "aperture", "cn2", "distance"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")
        if not (self.attenuation_db >= 0 and math.isfinite(self.attenuation_db)):
            raise ValueError(f"attenuation_db must be >= 0, got {self.attenuation_db}")

    @property
    def wavenumber(self) -> float:
        return 2 * math.pi / self.wavelength

    @property
    def eta_m(self) -> float:
        return 10 ** (-self.attenuation_db / 10)

    @property
    def rytov(self) -> float:
        return 1.23 * self.cn2 * self.wavenumber ** (7 / 6) * self.distance ** (11 / 6)

    @property
    def fresnel(self) -> float:
        return self.wavenumber * self.w0 ** 2 / (2 * self.distance)


@dataclass(frozen=True)
class BeamSample:
    x0: float
    y0: float
    theta1: float
    theta2: float
    phi: float

    def __post_init__(self) -> None:
        if not 0 <= self.phi < math.pi / 2:
            raise ValueError(f"phi must lie in [0, pi/2), got {self.phi}")

    def semi_axes(self, w0: float) -> tuple[float, float]:
        return w0 * math.exp(self.theta1 / 2), w0 * math.exp(self.theta2 / 2)


def turbulence_statistics(p: TurbulenceParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``(x0, y0, theta1, theta2)`` for weak turbulence."""
    s2 = p.rytov
    om = p.fresnel
    q = s2 * om ** (5 / 6)
    d = 1 + 2.96 * q
    var_xy = 0.33 * p.w0 ** 2 * s2 * om ** (-7 / 6)
    var_t = math.log1p(1.2 * q / d ** 2)
    cov_t = math.log1p(-0.8 * q / d ** 2)
    mean_t = math.log(d ** 2 / (om ** 2 * math.sqrt(d ** 2 + 1.2 * q)))
    mean = np.array([0.0, 0.0, mean_t, mean_t])
    cov = np.array([
        [var_xy, 0, 0, 0],
        [0, var_xy, 0, 0],
        [0, 0, var_t, cov_t],
        [0, 0, cov_t, var_t],
    ])
    return mean, cov


def elliptic_beam_transmissivity(s: BeamSample, p: TurbulenceParams) -> float:
    """Aperture transmissivity for one beam realisation (excludes ``eta_m``)."""
    return float(kernels.aperture_transmissivity(
        s.x0, s.y0, s.theta1, s.theta2, s.phi, p.w0, p.aperture))


def aperture_transmissivities(beams: np.ndarray, phi: np.ndarray, p: TurbulenceParams) -> np.ndarray:
    """Vectorised form: ``beams`` has columns ``(x0, y0, theta1, theta2)``."""
    beams = np.asarray(beams, dtype=float)
    return kernels.aperture_transmissivity(
        beams[:, 0], beams[:, 1], beams[:, 2], beams[:, 3], phi, p.w0, p.aperture)


@dataclass(frozen=True)
class ChannelEnsemble:
    """Finite sample of sub-channel transmissivities.

    ``excess_noise`` is either a constant or a vectorised function of the
    transmissivity giving the excess noise of each sub-channel.
    """

    eta: np.ndarray
    seed: int | None = None
    params: TurbulenceParams | None = None
    excess_noise: ExcessNoise = 0.01

    def __post_init__(self) -> None:
        eta = np.array(self.eta, dtype=float).ravel()
        if eta.size == 0:
            raise ValueError("ensemble must contain at least one transmissivity")
        if np.any(~np.isfinite(eta)) or eta.min() < 0 or eta.max() > 1:
            raise ValueError("transmissivities must lie in [0, 1]")
        if not callable(self.excess_noise) and self.excess_noise < 0:
            raise ValueError(f"excess noise must be >= 0, got {self.excess_noise}")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    def __len__(self) -> int:
        return self.eta.size

    @property
    def eta_max(self) -> float:
        return float(self.eta.max())

    def xi(self, eta: np.ndarray | None = None) -> np.ndarray:
        eta = self.eta if eta is None else eta
        if callable(self.excess_noise):
            return np.asarray(self.excess_noise(eta), dtype=float) * np.ones_like(eta)
        return np.full_like(eta, float(self.excess_noise))


def sample_ensemble(p: TurbulenceParams, n: int, seed: int | None = None,
                    excess_noise: ExcessNoise = 0.01) -> ChannelEnsemble:
    """Draw ``n`` transmissivities ``eta_m * eta_a`` from the elliptic-beam model."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    mean, cov = turbulence_statistics(p)
    chol = np.linalg.cholesky(cov)
    beams = mean + rng.standard_normal((n, 4)) @ chol.T
    phi = rng.uniform(0.0, math.pi / 2, n)
    eta = p.eta_m * aperture_transmissivities(beams, phi, p)
    return ChannelEnsemble(eta, seed=seed, params=p, excess_noise=excess_noise)


@dataclass(frozen=True)
class ChannelMoments:
    mean_eta: float
    mean_sqrt: float
    var_sqrt: float
    mean_eta_xi: float
    eta_max: float
    probability: float
    count: int
    # <eta xi> / <eta>; kept separately so a constant noise model maps back exactly
    weighted_xi: float = field(default=0.0, repr=False)


@dataclass(frozen=True)
class EffectiveChannel:
    eta_f: float
    xi_f: float


def _mean(x: np.ndarray) -> float:
    # a constant subset returns its value untouched by summation round-off
    if x[0] == x[-1] and np.all(x == x[0]):
        return float(x[0])
    return float(np.mean(x))


def subset_moments(e: ChannelEnsemble, mask: np.ndarray) -> ChannelMoments:
    """Moments of the sub-channels selected by a boolean ``mask``."""
    eta = e.eta[mask]
    if eta.size == 0:
        raise EmptySelectionError("no sub-channel in the selected range")
    root = np.sqrt(eta)
    mean_eta = _mean(eta)
    mean_sqrt = _mean(root)
    var_sqrt = max(_mean((root - mean_sqrt) ** 2), 0.0)
    if callable(e.excess_noise):
        mean_eta_xi = _mean(eta * e.xi(eta))
        weighted_xi = mean_eta_xi / mean_eta if mean_eta > 0 else 0.0
    else:
        weighted_xi = float(e.excess_noise)
        mean_eta_xi = weighted_xi * mean_eta
    return ChannelMoments(
        mean_eta=mean_eta,
        mean_sqrt=mean_sqrt,
        var_sqrt=var_sqrt,
        mean_eta_xi=mean_eta_xi,
        eta_max=float(eta.max()),
        probability=eta.size / e.eta.size,
        count=int(eta.size),
        weighted_xi=weighted_xi,
    )


def moments(e: ChannelEnsemble, lo: float = 0.0, hi: float = math.inf,
            include_hi: bool = True) -> ChannelMoments:
    """Sample moments over sub-channels with ``lo <= eta <= hi`` (or ``< hi``)."""
    mask = (e.eta >= lo) & ((e.eta <= hi) if include_hi else (e.eta < hi))
    return subset_moments(e, mask)


def effective_params(m: ChannelMoments, V: float) -> EffectiveChannel:
    """Effective ``(eta_f, xi_f)`` at quadrature variance ``V``."""
    if V < 1:
        raise ValueError(f"quadrature variance must be >= 1, got {V}")
    # equals <sqrt(eta)>^2 but is exact for a constant channel
    eta_f = m.mean_eta - m.var_sqrt
    if eta_f <= 0:
        raise DegenerateChannelError("effective transmissivity is zero")
    xi_f = m.var_sqrt * (V - 1) / eta_f + m.weighted_xi * (m.mean_eta / eta_f)
    return EffectiveChannel(eta_f=min(eta_f, 1.0), xi_f=xi_f)


def save_ensemble(e: ChannelEnsemble, path: str | Path) -> None:
    if callable(e.excess_noise):
        raise ValueError("only a constant excess-noise model can be persisted")
    params = json.dumps(asdict(e.params), sort_keys=True) if e.params else "null"
    lines = [
        f"# {ENSEMBLE_FORMAT}",
        f"# seed={'null' if e.seed is None else e.seed}",
        f"# params={params}",
        f"# excess_noise={float(e.excess_noise)!r}",
    ]
    lines += [f"{v:.12g}" for v in e.eta]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ensemble(path: str | Path) -> ChannelEnsemble:
    header: dict[str, str] = {}
    values = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != f"# {ENSEMBLE_FORMAT}":
            raise ValueError(f"{path}: not an ensemble file (header {first!r})")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key.strip()] = val.strip()
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad transmissivity {line!r}") from None
    seed = None if header.get("seed", "null") == "null" else int(header["seed"])
    raw = json.loads(header.get("params", "null"))
    params = TurbulenceParams(**raw) if raw else None
    return ChannelEnsemble(np.array(values), seed=seed, params=params,
                           excess_noise=float(header.get("excess_noise", "0.01")))
