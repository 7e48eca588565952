"""Post-selection, clusterization and per-sub-channel key rates.

Every strategy reduces to evaluating :func:`evaluate_subset` on a subset of
the channel ensemble, so the baseline (all data) is the same code path with
a full mask. Rates always use the total block size ``N`` as denominator.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import (
    ChannelEnsemble,
    ChannelMoments,
    DegenerateChannelError as ChannelDegenerate,
    EffectiveChannel,
    EmptySelectionError,
    effective_params,
    subset_moments,
)
from .estimation import (
    EstimationError,
    analytic_error_bars,
    sample_channel_estimate,
    sample_subchannel_minima,
    worst_case,
)
from .keyrate import (
    ATTACKS,
    REGIMES,
    KeyRateResult,
    ProtocolParams,
    SecurityBudget,
    eve_information,
    finite_key_length,
    mutual_information,
)

ESTIMATION_MODES = ("analytic", "simulated")
DEFAULT_THRESHOLD_POINTS = 40
DEFAULT_THRESHOLD_SPAN = 0.95
VA_BOUNDS = (0.1, 100.0)
VA_TOL = 1e-3
VA_GRID_POINTS = 25


class OptimizationError(ValueError):
    """The objective returned a non-finite value."""


@dataclass(frozen=True)
class PostSelectionResult:
    eta_th: float
    probability: float
    moments: ChannelMoments
    effective: EffectiveChannel
    N_ps: float = math.nan
    k_ps: float = math.nan

    @property
    def N_key_ps(self) -> float:
        return self.N_ps - self.k_ps


@dataclass(frozen=True)
class Cluster:
    """Transmissivity bin ``[lo, hi)``; the last bin also holds ``hi``."""

    index: int
    lo: float
    hi: float
    probability: float
    moments: ChannelMoments | None
    effective: EffectiveChannel | None
    budget: SecurityBudget | None = None

    @property
    def empty(self) -> bool:
        return self.moments is None


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _children(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent child seeds; unlike ``spawn`` this never mutates its input."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, i)) for i in range(n)]


def evaluate_subset(m: ChannelMoments, pp: ProtocolParams, sb: SecurityBudget, attack: str,
                    regime: str, *, weight: float | None = None, strategy: str = "baseline",
                    estimation_mode: str = "analytic", seed=None, exhaustive: bool = True,
                    n_shot: float | None = None) -> KeyRateResult:
    """Key rate contributed by the sub-channels summarised in ``m``.

    ``weight`` is the share of all signals falling in the subset (defaults to
    the subset's probability). Eve's term in the finite regime uses the
    worst-case estimate from ``weight * k`` revealed samples.
    """
    if estimation_mode not in ESTIMATION_MODES:
        raise ValueError(f"unknown estimation mode {estimation_mode!r}")
    w = m.probability if weight is None else weight
    det = pp.detector
    V = pp.V
    try:
        ec = effective_params(m, V)
    except ChannelDegenerate:
        return KeyRateResult(regime, attack, strategy, 0.0, 0.0, 0.0, False, pp.V_A)
    echo = dict(eta_f=ec.eta_f, xi_f=ec.xi_f)

    if regime == "asymptotic":
        I_ab = mutual_information(ec.eta_f, ec.xi_f, V, det)
        raw = w * (pp.beta * I_ab - eve_information(attack, ec.eta_f, ec.xi_f, V, det))
        return KeyRateResult(regime, attack, strategy, math.nan, max(raw, 0.0), raw, raw > 0,
                             pp.V_A, eta_f_wc=ec.eta_f, xi_f_wc=ec.xi_f, **echo)
    if regime != "finite":
        raise ValueError(f"unknown regime {regime!r}")

    N_used = w * pp.N_key
    k_used = w * pp.k
    n_shot = pp.N if n_shot is None else n_shot
    penalty = -2 * math.log2(1 / (2 * sb.eps_bar))
    if N_used < 1 or k_used < 2:
        return KeyRateResult(regime, attack, strategy, 0.0, 0.0, min(penalty / pp.N, 0.0),
                             False, pp.V_A, **echo)
    try:
        if estimation_mode == "analytic":
            est = analytic_error_bars(ec.eta_f, ec.xi_f, pp.V_A, det, k_used, sb.eps_PE,
                                      n_shot=n_shot)
        else:
            est = sample_channel_estimate(ec.eta_f, ec.xi_f, pp.V_A, det, int(round(k_used)),
                                          sb.eps_PE, _rng(seed), n_shot=int(n_shot))
    except EstimationError:
        return KeyRateResult(regime, attack, strategy, 0.0, 0.0, penalty / pp.N, False,
                             pp.V_A, **echo)
    eta_hat = min(est.eta_f.value, 1.0)
    I_ab = mutual_information(eta_hat, est.xi_f.value, V, det)

    def eve(e: float, x: float) -> float:
        # no transmissivity left means no key can be certified
        return pp.beta * I_ab if e <= 0 else eve_information(attack, e, x, V, det)

    e_wc, x_wc = worst_case(est, eve if exhaustive else None)
    ell, raw = finite_key_length(pp, sb, I_ab, eve(e_wc, x_wc), N_used)
    extras = {"xi_clamped": est.xi_clamped}
    return KeyRateResult(regime, attack, strategy, max(ell, 0.0), max(raw, 0.0), raw, ell > 0,
                         pp.V_A, eta_f_wc=e_wc, xi_f_wc=x_wc, extras=extras, **echo)


def full_mask(e: ChannelEnsemble) -> np.ndarray:
    return np.ones(len(e), dtype=bool)


def evaluate_baseline(e: ChannelEnsemble, pp: ProtocolParams, sb: SecurityBudget,
                      attack: str = "collective", regime: str = "finite", **kw) -> KeyRateResult:
    """Rate over all data without any post-processing strategy."""
    return evaluate_subset(subset_moments(e, full_mask(e)), pp, sb, attack, regime, **kw)


def selection_mask(e: ChannelEnsemble, eta_th: float, pp: ProtocolParams | None = None,
                   sb: SecurityBudget | None = None, estimation_mode: str = "analytic",
                   N_s: float = 1e5, seed=None) -> np.ndarray:
    """Sub-channels kept at threshold ``eta_th``.

    In analytic mode the true transmissivity decides. In simulated mode each
    sub-channel's lower confidence limit ``eta_min`` decides, estimated from
    ``c * N_s`` revealed samples.
    """
    if eta_th < 0:
        raise ValueError(f"eta_th must be >= 0, got {eta_th}")
    if estimation_mode == "analytic":
        return e.eta >= eta_th
    if pp is None or sb is None:
        raise ValueError("simulated selection needs protocol parameters and a budget")
    k_s = int(round(pp.reveal_fraction * N_s))
    eta_min = sample_subchannel_minima(e.eta, e.xi(), pp.V_A, pp.detector, k_s, sb.eps_PE,
                                       _rng(seed))
    return eta_min >= eta_th


def post_select(e: ChannelEnsemble, eta_th: float, V: float, pp: ProtocolParams | None = None,
                mask: np.ndarray | None = None) -> PostSelectionResult:
    """Restricted moments and effective channel of the kept sub-channels."""
    mask = selection_mask(e, eta_th) if mask is None else mask
    m = subset_moments(e, mask)
    eff = effective_params(m, V)
    sizes = {}
    if pp is not None:
        sizes = dict(N_ps=m.probability * pp.N, k_ps=m.probability * pp.k)
    return PostSelectionResult(eta_th, m.probability, m, eff, **sizes)


def evaluate_post_selection(e: ChannelEnsemble, eta_th: float, pp: ProtocolParams,
                            sb: SecurityBudget, attack: str = "collective",
                            regime: str = "finite", estimation_mode: str = "analytic",
                            seed=None, N_s: float = 1e5, exhaustive: bool = True
                            ) -> KeyRateResult:
    sel_seed, est_seed = _children(seed, 2)
    mask = selection_mask(e, eta_th, pp, sb, estimation_mode, N_s, sel_seed)
    tag = "post-selection"
    try:
        m = subset_moments(e, mask)
    except EmptySelectionError:
        return KeyRateResult(regime, attack, tag, 0.0, 0.0, 0.0, False, pp.V_A,
                             extras={"eta_th": eta_th, "P": 0.0})
    r = evaluate_subset(m, pp, sb, attack, regime, strategy=tag,
                        estimation_mode=estimation_mode, seed=est_seed, exhaustive=exhaustive)
    return replace(r, extras={**r.extras, "eta_th": eta_th, "P": m.probability})


def cluster_index(e: ChannelEnsemble, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin edges ``j * eta_max / n`` and the 0-based cluster of each sub-channel."""
    if n < 1:
        raise ValueError(f"need at least one cluster, got n={n}")
    top = e.eta_max
    edges = top * np.arange(n + 1) / n
    edges[-1] = top
    idx = np.clip(np.searchsorted(edges, e.eta, side="right") - 1, 0, n - 1)
    return edges, idx


def clusterize(e: ChannelEnsemble, n: int, V: float,
               sb: SecurityBudget | None = None) -> list[Cluster]:
    """Partition the ensemble into ``n`` uniform transmissivity bins."""
    edges, idx = cluster_index(e, n)
    out = []
    for j in range(n):
        mask = idx == j
        if not mask.any():
            out.append(Cluster(j + 1, float(edges[j]), float(edges[j + 1]), 0.0, None, None))
            continue
        m = subset_moments(e, mask)
        try:
            eff = effective_params(m, V)
        except ChannelDegenerate:
            eff = None
        out.append(Cluster(j + 1, float(edges[j]), float(edges[j + 1]), m.probability, m, eff,
                           sb.scaled(m.probability) if sb is not None else None))
    return out


def _combine(parts: Sequence[KeyRateResult], regime: str, attack: str, strategy: str,
             V_A: float, N: float, extras: dict) -> KeyRateResult:
    """Sum per-subset results, discarding subsets without a positive key."""
    if regime == "asymptotic":
        rate = sum(max(p.raw_rate, 0.0) for p in parts)
        raw = rate if rate > 0 else max((p.raw_rate for p in parts), default=0.0)
        return KeyRateResult(regime, attack, strategy, math.nan, rate, raw, rate > 0, V_A,
                             extras=extras)
    length = sum(p.key_length for p in parts if p.secure)
    rate = length / N
    # with nothing secure, the least negative subset keeps the objective informative
    raw = rate if length > 0 else max((p.raw_rate for p in parts), default=0.0)
    return KeyRateResult(regime, attack, strategy, length, rate, raw, length > 0, V_A,
                         extras=extras)


def evaluate_clustered(e: ChannelEnsemble, n: int, pp: ProtocolParams, sb: SecurityBudget,
                       attack: str = "collective", regime: str = "finite",
                       estimation_mode: str = "analytic", seed=None,
                       exhaustive: bool = True) -> KeyRateResult:
    """Total rate with each cluster post-processed separately."""
    _, idx = cluster_index(e, n)
    seeds = _children(seed, n)
    parts = []
    probs = []
    for j in range(n):
        mask = idx == j
        if not mask.any():
            probs.append(0.0)
            continue
        m = subset_moments(e, mask)
        probs.append(m.probability)
        parts.append(evaluate_subset(m, pp, sb.scaled(m.probability), attack, regime,
                                     strategy="clustered", estimation_mode=estimation_mode,
                                     seed=seeds[j], exhaustive=exhaustive))
    res = _combine(parts, regime, attack, "clustered", pp.V_A, pp.N,
                   {"n": n, "P": ";".join(f"{p:.6g}" for p in probs)})
    if n == 1:
        # a single cluster is the baseline: keep its channel echo
        p = parts[0]
        res = replace(res, eta_f=p.eta_f, xi_f=p.xi_f, eta_f_wc=p.eta_f_wc, xi_f_wc=p.xi_f_wc)
    return res


def per_subchannel_rate(e: ChannelEnsemble, pp: ProtocolParams, sb: SecurityBudget,
                        attack: str = "collective", regime: str = "finite", N_s: float = 1e5,
                        k_s: float | None = None, estimation_mode: str = "analytic",
                        seed=None) -> KeyRateResult:
    """Rate when every stability window is analysed on its own.

    The block of ``N`` signals spans ``W = N / N_s`` windows; each ensemble
    sample stands for ``W / n`` of them, with security parameters ``eps / W``.
    """
    W = pp.N / N_s
    if W < 1:
        raise ValueError("block is shorter than one stability window")
    k_s = pp.reveal_fraction * N_s if k_s is None else k_s
    sub = replace(pp, N=N_s, reveal_fraction=k_s / N_s)
    sb_i = sb.scaled(1 / W)
    seeds = _children(seed, len(e))
    eta_all = e.eta
    xi_all = e.xi()
    scale = W / len(e)
    parts = []
    for i in range(len(e)):
        one = ChannelEnsemble(eta_all[i:i + 1], excess_noise=float(xi_all[i]))
        m = subset_moments(one, full_mask(one))
        r = evaluate_subset(m, sub, sb_i, attack, regime, weight=1.0, strategy="per-subchannel",
                            estimation_mode=estimation_mode, seed=seeds[i], n_shot=N_s)
        parts.append(r)
    if regime == "asymptotic":
        rate = sum(max(p.raw_rate, 0.0) for p in parts) / len(e)
        raw = rate if rate > 0 else max(p.raw_rate for p in parts)
        return KeyRateResult(regime, attack, "per-subchannel", math.nan, rate, raw, rate > 0,
                             pp.V_A, extras={"N_s": N_s})
    length = scale * sum(p.key_length for p in parts if p.secure)
    best = max(p.key_length if p.secure else p.raw_rate * N_s for p in parts)
    raw = length / pp.N if length > 0 else best / N_s / W
    return KeyRateResult(regime, attack, "per-subchannel", length, length / pp.N, raw,
                         length > 0, pp.V_A, extras={"N_s": N_s})


def optimize_modulation(objective: Callable[[float], float],
                        bounds: tuple[float, float] = VA_BOUNDS, tol: float = VA_TOL,
                        grid_points: int = VA_GRID_POINTS) -> tuple[float, float]:
    """Maximise ``objective(V_A)`` over ``bounds``.

    A log-spaced grid brackets the maximum, then golden-section search in
    ``log V_A`` refines it until the bracket is narrower than ``tol``
    relative. Deterministic for a deterministic objective.
    """
    lo, hi = bounds
    if not 0 < lo < hi:
        raise ValueError(f"need 0 < lo < hi, got {bounds}")
    cache: dict[float, float] = {}

    def f(u: float) -> float:
        if u not in cache:
            x = math.exp(u)
            val = float(objective(x))
            if not math.isfinite(val):
                raise OptimizationError(f"objective is {val} at V_A = {x!r}")
            cache[u] = val
        return cache[u]

    us = np.linspace(math.log(lo), math.log(hi), grid_points)
    vals = [f(u) for u in us]
    i = int(np.argmax(vals))
    a = us[max(i - 1, 0)]
    b = us[min(i + 1, grid_points - 1)]
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    while b - a > math.log1p(tol):
        if f(c) >= f(d):
            b, d = d, c
            c = b - g * (b - a)
        else:
            a, c = c, d
            d = a + g * (b - a)
    best = max(cache, key=lambda u: (cache[u], -u))
    return math.exp(best), cache[best]


def default_threshold_grid(e: ChannelEnsemble, points: int = DEFAULT_THRESHOLD_POINTS,
                           span: float = DEFAULT_THRESHOLD_SPAN) -> np.ndarray:
    return np.linspace(0.0, span * e.eta_max, points)


def _evaluate_point(strategy: str, e: ChannelEnsemble, x, pp: ProtocolParams,
                    sb: SecurityBudget, attack: str, regime: str, **kw) -> KeyRateResult:
    if strategy == "post-selection":
        return evaluate_post_selection(e, float(x), pp, sb, attack, regime, **kw)
    if strategy == "clustered":
        return evaluate_clustered(e, int(x), pp, sb, attack, regime, **kw)
    raise ValueError(f"unknown strategy {strategy!r}")


def sweep(e: ChannelEnsemble, pp: ProtocolParams, sb: SecurityBudget, strategy: str,
          grid: Iterable, attacks: Sequence[str] = ATTACKS, regimes: Sequence[str] = REGIMES,
          optimize: bool = True, estimation_mode: str = "analytic", seed=None,
          bounds: tuple[float, float] = VA_BOUNDS, tol: float = VA_TOL,
          workers: int = 1, exhaustive: bool = True) -> list[KeyRateResult]:
    """Evaluate a strategy on every grid point, attack and regime.

    Rows come back ordered by grid point, then attack, then regime. With
    ``optimize`` the modulation variance is chosen per row to maximise the
    signed rate.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    seeds = _children(seed, len(grid))
    jobs = [(x, s, a, r) for x, s in zip(grid, seeds) for a in attacks for r in regimes]

    def run(job) -> KeyRateResult:
        x, s, attack, regime = job
        kw = dict(estimation_mode=estimation_mode, seed=s, exhaustive=exhaustive)

        def at(V_A: float) -> KeyRateResult:
            return _evaluate_point(strategy, e, x, pp.with_modulation(V_A), sb, attack, regime,
                                   **kw)

        if not optimize:
            return at(pp.V_A)
        v_opt, _ = optimize_modulation(lambda v: at(v).raw_rate, bounds, tol)
        return at(v_opt)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]
