"""Command-line interface.

Every subcommand takes ``--config PATH`` or ``--preset NAME``, an optional
``--seed`` overriding the configured one, and ``--out DIR``. Outputs are
written to a staging directory and moved into place only on success.

Exit codes: 0 success, 1 configuration error, 2 evaluation error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import __version__, kernels
from .channel import ChannelEnsemble, effective_params, load_ensemble, moments, sample_ensemble, save_ensemble
from .config import PRESETS, ConfigError, ScenarioConfig, load_config, preset_config
from .estimation import (
    Estimate,
    effective_channel_estimate,
    load_batch,
    mle_linear,
    save_batch,
    shot_noise_estimate,
    simulate_quadratures,
    simulate_shot_noise,
    worst_case,
)
from .keyrate import KeyRateResult, general_attack_epsilon
from .strategies import default_threshold_grid, evaluate_baseline, optimize_modulation, sweep

EXIT_OK, EXIT_CONFIG, EXIT_EVAL = 0, 1, 2
MANIFEST_FORMAT = "fscvqkd-run v1"

RESULT_COLUMNS = ["attack", "regime", "V_A_opt", "rate", "secure", "raw_rate", "key_length",
                  "eta_f", "xi_f", "eta_f_wc", "xi_f_wc"]


class EvaluationError(RuntimeError):
    pass


def fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _result_row(r: KeyRateResult) -> list[Any]:
    return [r.attack, r.regime, r.V_A, r.rate, r.secure, r.raw_rate, r.key_length,
            r.eta_f, r.xi_f, r.eta_f_wc, r.xi_f_wc]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """One CLI invocation: owns a staging directory and the manifest."""

    def __init__(self, cfg: ScenarioConfig, command: str, out: Path) -> None:
        self.cfg = cfg
        self.command = command
        self.out = out
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.staging-", dir=out.parent))
        self.files: list[str] = []
        self.info: dict[str, Any] = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.stage / name

    def ensemble(self) -> ChannelEnsemble:
        cfg = self.cfg
        if cfg.ensemble_path is not None:
            e = load_ensemble(cfg.ensemble_path)
            e = replace(e, excess_noise=cfg.excess_noise)
            self.info["ensemble_source"] = str(cfg.ensemble_path)
            self.info["ensemble_sha256"] = _sha256(cfg.ensemble_path)
            return e
        e = sample_ensemble(cfg.turbulence, cfg.samples, seed=cfg.seed,
                            excess_noise=cfg.excess_noise)
        save_ensemble(e, self.path("ensemble.txt"))
        self.info["ensemble_source"] = "sampled"
        return e

    def sweep_seed(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.cfg.seed, spawn_key=(1,))

    def commit(self) -> None:
        manifest = {
            "format": MANIFEST_FORMAT,
            "command": self.command,
            "version": __version__,
            "backend": kernels.BACKEND,
            "scenario": self.cfg.name,
            "config": self.cfg.to_dict(),
            **self.info,
            "outputs": {n: _sha256(self.stage / n) for n in self.files},
        }
        (self.stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                                  + "\n")
        self.out.mkdir(parents=True, exist_ok=True)
        for name in [*self.files, "manifest.json"]:
            shutil.move(str(self.stage / name), str(self.out / name))
        shutil.rmtree(self.stage, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def cmd_sample(run: Run) -> None:
    e = run.ensemble()
    if "ensemble.txt" not in run.files:
        save_ensemble(e, run.path("ensemble.txt"))


def cmd_moments(run: Run) -> None:
    e = run.ensemble()
    m = moments(e)
    ec = effective_params(m, run.cfg.protocol.V)
    write_csv(run.path("moments.csv"),
              ["mean_eta", "mean_sqrt", "var_sqrt", "mean_eta_xi", "eta_max", "probability",
               "count", "V", "eta_f", "xi_f"],
              [[m.mean_eta, m.mean_sqrt, m.var_sqrt, m.mean_eta_xi, m.eta_max, m.probability,
                m.count, run.cfg.protocol.V, ec.eta_f, ec.xi_f]])


def cmd_keyrate(run: Run) -> None:
    cfg = run.cfg
    e = run.ensemble()
    sb = cfg.budget()
    st = cfg.strategy
    rows = []
    for attack in cfg.attacks:
        for regime in cfg.regimes:
            def at(V_A: float) -> KeyRateResult:
                return evaluate_baseline(e, cfg.protocol.with_modulation(V_A), sb, attack, regime,
                                         estimation_mode=st.estimation, seed=run.sweep_seed(),
                                         exhaustive=st.exhaustive)
            v = optimize_modulation(lambda x: at(x).raw_rate)[0] if st.optimize else cfg.protocol.V_A
            rows.append(_result_row(at(v)))
    write_csv(run.path("results.csv"), RESULT_COLUMNS, rows)
    eps_gen, meaningful = general_attack_epsilon(cfg.eps, cfg.protocol.N_key)
    run.info["general_attack_epsilon"] = {"value": eps_gen, "meaningful": meaningful,
                                          "note": "indicative, unknown constant"}


def _sweep(run: Run, strategy: str, key: str) -> None:
    cfg = run.cfg
    e = run.ensemble()
    st = cfg.strategy
    if strategy == "post-selection":
        grid = list(st.thresholds) if st.thresholds is not None else list(default_threshold_grid(e))
    else:
        grid = list(st.clusters)
    res = sweep(e, cfg.protocol, cfg.budget(), strategy, grid, cfg.attacks, cfg.regimes,
                optimize=st.optimize, estimation_mode=st.estimation, seed=run.sweep_seed(),
                workers=st.workers, exhaustive=st.exhaustive)
    per_point = len(cfg.attacks) * len(cfg.regimes)
    rows = []
    for i, r in enumerate(res):
        x = grid[i // per_point]
        p = r.extras.get("P", "")
        rows.append([x, *_result_row(r), p])
    write_csv(run.path("results.csv"), [key, *RESULT_COLUMNS, "P"], rows)


def cmd_sweep_ps(run: Run) -> None:
    _sweep(run, "post-selection", "eta_th")


def cmd_sweep_cluster(run: Run) -> None:
    _sweep(run, "clustered", "n")


def cmd_estimate(run: Run, batch_path: Path | None, shot_path: Path | None) -> None:
    cfg = run.cfg
    e = run.ensemble()
    pp = cfg.protocol
    det = pp.detector
    ec = effective_params(moments(e), pp.V)
    seeds = np.random.SeedSequence(cfg.seed, spawn_key=(2,)).spawn(2)
    k = cfg.strategy.estimate_k
    if batch_path is not None:
        batch = load_batch(batch_path)
        run.info["batch_source"] = str(batch_path)
    else:
        batch = simulate_quadratures(ec.eta_f, ec.xi_f, pp.V_A, det, k, seeds[0])
        save_batch(batch, run.path("batch.csv"))
    if shot_path is not None:
        shot = load_batch(shot_path)
        run.info["shot_source"] = str(shot_path)
    else:
        shot = simulate_shot_noise(det, k, seeds[1])
        save_batch(shot, run.path("shot_noise.csv"))
    eps_PE = cfg.eps_PE
    t, s2 = mle_linear(batch, eps_PE)
    s0 = shot_noise_estimate(shot, eps_PE)
    est = effective_channel_estimate(t, s2, s0, Estimate(det.eta_B, 0.0, eps_PE))
    e_wc, x_wc = worst_case(est)
    truth = {
        "t": math.sqrt(det.eta_B * ec.eta_f / 2),
        "sigma2": 1 + det.nu_B + det.eta_B * ec.eta_f * ec.xi_f / 2,
        "sigma0_2": 1 + det.nu_B,
        "eta_f": ec.eta_f,
        "xi_f": ec.xi_f,
    }
    ests = {"t": t, "sigma2": s2, "sigma0_2": s0, "eta_f": est.eta_f, "xi_f": est.xi_f}
    rows = [[n, ests[n].value, ests[n].halfwidth, truth[n], ests[n].covers(truth[n])]
            for n in ests]
    rows.append(["eta_f_wc", e_wc, 0.0, ec.eta_f, math.nan])
    rows.append(["xi_f_wc", x_wc, 0.0, ec.xi_f, math.nan])
    write_csv(run.path("estimates.csv"), ["parameter", "value", "halfwidth", "truth", "covers"],
              rows)
    run.info["xi_clamped"] = est.xi_clamped


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fscvqkd", description="Finite-size key rates for free-space CV-QKD.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "sample": "sample a channel ensemble",
        "moments": "ensemble moments and effective channel",
        "keyrate": "baseline key rates over all data",
        "sweep-ps": "post-selection threshold sweep",
        "sweep-cluster": "clusterization sweep over the number of clusters",
        "estimate": "parameter estimation on simulated or supplied data",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", type=Path, help="TOML scenario file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="named scenario")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "estimate":
            p.add_argument("--batch", type=Path, help="CSV with columns a,b")
            p.add_argument("--shot", type=Path, help="CSV with column b0")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else preset_config(args.preset)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError(f"--seed: expected an unsigned 64-bit integer, got {args.seed}")
            cfg = replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    commands: dict[str, Callable[[Run], None]] = {
        "sample": cmd_sample,
        "moments": cmd_moments,
        "keyrate": cmd_keyrate,
        "sweep-ps": cmd_sweep_ps,
        "sweep-cluster": cmd_sweep_cluster,
        "estimate": lambda r: cmd_estimate(r, args.batch, args.shot),
    }
    try:
        run = Run(cfg, args.command, args.out)
    except OSError as exc:
        print(f"error: cannot prepare {args.out}: {exc}", file=sys.stderr)
        return EXIT_EVAL
    try:
        commands[args.command](run)
        run.commit()
    except Exception as exc:  # any failure leaves no partial outputs behind
        run.abort()
        print(f"evaluation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EVAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
