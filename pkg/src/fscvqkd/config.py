"""Scenario configuration: TOML schema, validation and named presets.

Schema (version 1)::

    version = 1            # optional
    preset = "fig1-L3.5km" # optional base; sections below override it
    seed = 1

    [turbulence]           # exactly one of [turbulence] or channel.ensemble
    distance = 3500.0      # required; other optics default to the presets
    wavelength = 809e-9
    w0 = 0.02
    aperture = 0.04
    cn2 = 1.5e-14
    attenuation_db = 1.25

    [channel]
    samples = 10000
    excess_noise = 0.01
    ensemble = "ens.txt"   # persisted ensemble, relative to the config file

    [protocol]
    N = 1e10               # required
    V_A = 2.0
    eta_B = 0.6
    nu_B = 0.25
    beta = 0.98
    d = 5
    reveal_fraction = 0.5

    [security]
    eps = 1e-9
    eps_PE = 1e-10

    [strategy]
    thresholds = [0.0, 0.01]   # default: 40 points on [0, 0.95 eta_max]
    clusters = [1, 2, 3]
    N_s = 1e5
    optimize = true
    estimation = "analytic"    # or "simulated"
    exhaustive = true
    workers = 1
    estimate_k = 100000        # batch size for the estimate command

    attacks = ["collective", "individual"]
    regimes = ["asymptotic", "finite"]
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .channel import TurbulenceParams
from .gaussian import DetectorModel
from .keyrate import ATTACKS, REGIMES, ProtocolParams, SecurityBudget, budget_split
from .strategies import ESTIMATION_MODES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass(frozen=True)
class StrategyConfig:
    thresholds: tuple[float, ...] | None = None
    clusters: tuple[int, ...] = tuple(range(1, 9))
    N_s: float = 1e5
    optimize: bool = True
    estimation: str = "analytic"
    exhaustive: bool = True
    workers: int = 1
    estimate_k: int = 100_000


@dataclass(frozen=True)
class ScenarioConfig:
    turbulence: TurbulenceParams | None
    ensemble_path: Path | None
    samples: int
    excess_noise: float
    protocol: ProtocolParams
    eps: float
    eps_PE: float
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    attacks: tuple[str, ...] = ATTACKS
    regimes: tuple[str, ...] = REGIMES
    seed: int = 0
    name: str = ""

    def budget(self) -> SecurityBudget:
        return budget_split(self.eps, self.eps_PE)

    def to_dict(self) -> dict[str, Any]:
        """Echo of the configuration in schema form; ``build_config`` accepts it back."""
        p = self.protocol
        out: dict[str, Any] = {"version": SCHEMA_VERSION, "seed": self.seed}
        if self.turbulence is not None:
            out["turbulence"] = asdict(self.turbulence)
        chan: dict[str, Any] = {"samples": self.samples, "excess_noise": self.excess_noise}
        if self.ensemble_path is not None:
            chan["ensemble"] = str(self.ensemble_path)
        strategy = {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in asdict(self.strategy).items() if v is not None}
        out.update({
            "channel": chan,
            "protocol": {
                "N": p.N, "V_A": p.V_A, "eta_B": p.detector.eta_B, "nu_B": p.detector.nu_B,
                "beta": p.beta, "d": p.d, "reveal_fraction": p.reveal_fraction,
            },
            "security": {"eps": self.eps, "eps_PE": self.eps_PE},
            "strategy": strategy,
            "attacks": list(self.attacks),
            "regimes": list(self.regimes),
        })
        return out


_FIG_BASE: dict[str, Any] = {
    "seed": 1,
    "turbulence": {
        "wavelength": 809e-9, "w0": 0.02, "aperture": 0.04, "cn2": 1.5e-14,
        "attenuation_db": 1.25,
    },
    "channel": {"samples": 10_000, "excess_noise": 0.01},
    "protocol": {
        "N": 1e10, "V_A": 2.0, "eta_B": 0.6, "nu_B": 0.25, "beta": 0.98, "d": 5,
        "reveal_fraction": 0.5,
    },
    "security": {"eps": 1e-9, "eps_PE": 1e-10},
    "strategy": {"N_s": 1e5},
}

_DISTANCES = {"L1.5km": 1500.0, "L2km": 2000.0, "L3km": 3000.0, "L3.5km": 3500.0}


def _make_presets() -> dict[str, dict[str, Any]]:
    out = {}
    for fig in ("fig1", "fig2"):
        for tag, dist in _DISTANCES.items():
            p = copy.deepcopy(_FIG_BASE)
            p["turbulence"]["distance"] = dist
            out[f"{fig}-{tag}"] = p
    return out


PRESETS: dict[str, dict[str, Any]] = _make_presets()

_SECTIONS: dict[str, set[str]] = {
    "turbulence": {"distance", "wavelength", "w0", "aperture", "cn2", "attenuation_db"},
    "channel": {"samples", "excess_noise", "ensemble"},
    "protocol": {"N", "V_A", "eta_B", "nu_B", "beta", "d", "reveal_fraction"},
    "security": {"eps", "eps_PE"},
    "strategy": {"thresholds", "clusters", "N_s", "optimize", "estimation", "exhaustive",
                 "workers", "estimate_k"},
}
_TOP = {"version", "preset", "seed", "attacks", "regimes", *_SECTIONS}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(raw: dict) -> None:
    for k, v in raw.items():
        if k not in _TOP:
            raise ConfigError(f"unknown key {k!r}")
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"{k}: expected a table")
            for kk in v:
                if kk not in _SECTIONS[k]:
                    raise ConfigError(f"unknown key {k}.{kk}")


def _num(sec: dict, name: str, where: str, *, default=None, lo=None, hi=None,
         lo_open=False, integer=False):
    if name not in sec:
        if default is None:
            raise ConfigError(f"{where}.{name}: required field is missing")
        return default
    v = sec[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{name}: expected a number, got {v!r}")
    if integer and (not float(v).is_integer()):
        raise ConfigError(f"{where}.{name}: expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{where}.{name}: must be finite")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{where}.{name}: must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{where}.{name}: must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _names(raw: dict, key: str, allowed: tuple[str, ...]) -> tuple[str, ...]:
    v = raw.get(key, list(allowed))
    if not isinstance(v, list) or not v or any(x not in allowed for x in v):
        raise ConfigError(f"{key}: expected a nonempty list drawn from {list(allowed)}, got {v!r}")
    return tuple(dict.fromkeys(v))


def build_config(raw: dict, base_dir: Path | None = None, name: str = "") -> ScenarioConfig:
    """Validate a parsed mapping (presets merged in) into a :class:`ScenarioConfig`."""
    _check_keys(raw)
    if "preset" in raw:
        preset = raw["preset"]
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        rest = {k: v for k, v in raw.items() if k != "preset"}
        # an explicit ensemble replaces the preset's optics
        base = copy.deepcopy(PRESETS[preset])
        if "ensemble" in rest.get("channel", {}) and "turbulence" not in rest:
            base.pop("turbulence")
        raw = _merge(base, rest)
        name = name or preset
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {version!r}")

    chan = raw.get("channel", {})
    has_turb = "turbulence" in raw
    has_ens = "ensemble" in chan
    if has_turb == has_ens:
        raise ConfigError("exactly one of [turbulence] or channel.ensemble must be given")

    turb = None
    ens_path = None
    if has_turb:
        t = raw["turbulence"]
        kw = {"distance": _num(t, "distance", "turbulence", lo=0, lo_open=True)}
        defaults = _FIG_BASE["turbulence"]
        for key in ("wavelength", "w0", "aperture", "cn2"):
            kw[key] = _num(t, key, "turbulence", default=defaults[key], lo=0, lo_open=True)
        kw["attenuation_db"] = _num(t, "attenuation_db", "turbulence",
                                    default=defaults["attenuation_db"], lo=0)
        turb = TurbulenceParams(**kw)
    else:
        p = chan["ensemble"]
        if not isinstance(p, str):
            raise ConfigError(f"channel.ensemble: expected a path string, got {p!r}")
        ens_path = Path(p)
        if not ens_path.is_absolute() and base_dir is not None:
            ens_path = base_dir / ens_path
        if not ens_path.is_file():
            raise ConfigError(f"channel.ensemble: file not found: {ens_path}")
    samples = _num(chan, "samples", "channel", default=10_000, lo=1, integer=True)
    xi = _num(chan, "excess_noise", "channel", default=0.01, lo=0)

    pr = raw.get("protocol", {})
    try:
        det = DetectorModel(eta_B=_num(pr, "eta_B", "protocol", default=0.6, lo=0, lo_open=True,
                                       hi=1),
                            nu_B=_num(pr, "nu_B", "protocol", default=0.25, lo=0))
        protocol = ProtocolParams(
            V_A=_num(pr, "V_A", "protocol", default=2.0, lo=0, lo_open=True),
            detector=det,
            beta=_num(pr, "beta", "protocol", default=0.98, lo=0, hi=1),
            d=_num(pr, "d", "protocol", default=5, lo=1, integer=True),
            N=_num(pr, "N", "protocol", lo=2),
            reveal_fraction=_num(pr, "reveal_fraction", "protocol", default=0.5, lo=0, hi=1),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"protocol: {exc}") from None

    sec = raw.get("security", {})
    eps = _num(sec, "eps", "security", default=1e-9, lo=0, lo_open=True, hi=1)
    eps_PE = _num(sec, "eps_PE", "security", default=1e-10, lo=0, lo_open=True)
    if eps_PE >= eps:
        raise ConfigError(f"security.eps_PE: must be < security.eps ({eps_PE} >= {eps})")

    st = raw.get("strategy", {})
    thresholds = st.get("thresholds")
    if thresholds is not None:
        if (not isinstance(thresholds, list) or not thresholds
                or any(isinstance(x, bool) or not isinstance(x, (int, float)) or x < 0
                       for x in thresholds)):
            raise ConfigError("strategy.thresholds: expected a nonempty list of numbers >= 0")
        thresholds = tuple(float(x) for x in thresholds)
    clusters = st.get("clusters", list(range(1, 9)))
    if (not isinstance(clusters, list) or not clusters
            or any(isinstance(x, bool) or not isinstance(x, int) or x < 1 for x in clusters)):
        raise ConfigError("strategy.clusters: expected a nonempty list of integers >= 1")
    estimation = st.get("estimation", "analytic")
    if estimation not in ESTIMATION_MODES:
        raise ConfigError(f"strategy.estimation: must be one of {list(ESTIMATION_MODES)}")
    for flag in ("optimize", "exhaustive"):
        if flag in st and not isinstance(st[flag], bool):
            raise ConfigError(f"strategy.{flag}: expected true or false")
    strategy = StrategyConfig(
        thresholds=thresholds,
        clusters=tuple(clusters),
        N_s=_num(st, "N_s", "strategy", default=1e5, lo=2),
        optimize=st.get("optimize", True),
        estimation=estimation,
        exhaustive=st.get("exhaustive", True),
        workers=_num(st, "workers", "strategy", default=1, lo=1, integer=True),
        estimate_k=_num(st, "estimate_k", "strategy", default=100_000, lo=2, integer=True),
    )

    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {seed!r}")

    return ScenarioConfig(
        turbulence=turb, ensemble_path=ens_path, samples=samples, excess_noise=xi,
        protocol=protocol, eps=eps, eps_PE=eps_PE, strategy=strategy,
        attacks=_names(raw, "attacks", ATTACKS), regimes=_names(raw, "regimes", REGIMES),
        seed=seed, name=name,
    )


def load_config(path: str | Path) -> ScenarioConfig:
    """Parse and validate a TOML scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        where = f"{path}:{m.group(1)}" if m else str(path)
        raise ConfigError(f"{where}: parse error: {exc}") from None
    try:
        return build_config(raw, base_dir=path.parent, name=path.stem)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def preset_config(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return build_config({"preset": name})
