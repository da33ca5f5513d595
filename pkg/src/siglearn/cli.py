"""Experiment driver: reproducible runs and plot-ready artifacts.

Every emitted file starts with a header line naming the producing
subcommand, the config hash, and the seed; identical (config, seed) inputs
produce byte-identical artifacts.  The ``--threads`` flag is accepted for
interface compatibility and never influences results.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    ReturnLaw,
    contraction_check,
    fixed_point_iterate,
    forecast_decay,
    lyapunov_estimate,
    whitened_norm_stress,
)
from .config import config_hash, default_config_text, load_config
from .errors import ConfigError, DivergenceError
from .experiments import (
    Scenario,
    build_scenario,
    derive_seed,
    greeks_fd_report,
    realizable_td_experiment,
    risk_report,
    train_scf,
    variance_experiment,
)
from .kernelspace import nystrom_to_json
from .proxy_flow import GeneratorParams, integrate_flow, new_generator
from .signature import paths_to_csv

SUBCOMMANDS = ("run-scf", "run-td", "run-greeks", "run-analysis", "run-all")


def _header(subcommand: str, chash: str, seed: int) -> str:
    return f"# subcommand={subcommand} config={chash} seed={seed}"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: Path, header_meta: dict, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"_meta": header_meta, **payload}, fh, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


class Runner:
    """Shared state for one CLI invocation."""

    def __init__(self, cfg: dict, seed: int, out_dir: Path, subcommand: str):
        self.cfg = cfg
        self.seed = seed
        self.out = out_dir
        self.subcommand = subcommand
        self.chash = config_hash(cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        self._scenario: Scenario | None = None
        self._trained: GeneratorParams | None = None
        self._train_diag = None

    def header(self) -> str:
        return _header(self.subcommand, self.chash, self.seed)

    def meta(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config_hash": self.chash,
            "seed": self.seed,
        }

    @property
    def scenario(self) -> Scenario:
        if self._scenario is None:
            self._scenario = build_scenario(self.cfg, self.seed)
        return self._scenario

    def trained_generator(self) -> GeneratorParams:
        if self._trained is None:
            result, diag = train_scf(self.cfg, self.scenario)
            self._trained = result.params
            self._train_diag = (result, diag)
        return self._trained

    # -- subcommand bodies -------------------------------------------------

    def run_scf(self) -> None:
        gen = self.trained_generator()
        result, diag = self._train_diag
        sc = self.scenario
        _write_csv(
            self.out / "scf_trace.csv",
            self.header(),
            ["step", "total", "score", "scf", "reg", "grad_norm", "update_max"],
            [
                [r["step"], r["total"], r["score"], r["scf"], r["reg"],
                 r["grad_norm"], r["update_max"]]
                for r in result.trace
            ],
        )
        _write_json(
            self.out / "generator.json",
            self.meta(),
            {
                "channels": gen.channels,
                "degree": gen.degree,
                "lie_degree": gen.lie_degree,
                "n_proxy_features": gen.n_proxy_features,
                "phase_powers": gen.phase_powers,
                "clock_rate": gen.clock_rate,
                "weights": gen.weights.tolist(),
                "losses_before": diag["before"],
                "losses_after": diag["after"],
                "training_trace_total": [r["total"] for r in result.trace],
            },
        )
        traj = integrate_flow(gen, sc.nmap, sc.junction_proxy, sc.grid)
        _write_csv(
            self.out / "proxy.csv",
            self.header(),
            ["s", "channels", "degree"]
            + [f"c{i}" for i in range(traj.flats.shape[1])],
            [
                [s, traj.channels, traj.degree] + list(flat)
                for s, flat in zip(traj.grid, traj.flats)
            ],
        )
        with open(self.out / "nystrom.json", "w") as fh:
            nystrom_to_json(sc.nmap, fh, meta=self.meta())
            fh.write("\n")
        term = sc.terminal_metric()
        _write_csv(
            self.out / "metric.csv",
            self.header(),
            [f"q{i}" for i in range(term.dim)],
            [list(row) for row in term.precision],
        )
        with open(self.out / "history.csv", "w", newline="") as fh:
            paths_to_csv([sc.history_path], fh, header_lines=[self.header()])
        ens = sc.train_ensemble
        sample = min(8, ens.n_paths)
        rows = []
        for pid in range(sample):
            for j in range(ens.n_grid):
                reward = 0.0 if j == 0 else ens.rewards[pid, j - 1]
                rows.append(
                    [pid, ens.times[j]]
                    + list(ens.values[pid, j])
                    + [int(ens.jump_flags[pid, j]), reward]
                )
        dim = ens.values.shape[2]
        _write_csv(
            self.out / "ensemble.csv",
            self.header(),
            ["path_id", "t"] + [f"x_{i + 1}" for i in range(dim)] + ["jump_flag", "reward"],
            rows,
        )

    def run_td(self) -> None:
        rep = realizable_td_experiment(self.cfg, self.scenario)
        sweep = rep["sweep"]
        n = sweep.objective_trace.size
        # dense early trace, thinned tail, always the final iteration
        kept = [i for i in range(n) if i < 1000 or (i + 1) % 100 == 0 or i == n - 1]
        _write_csv(
            self.out / "td_trace.csv",
            self.header(),
            ["iter", "objective", "weight_norm", "max_abs_delta"],
            [
                [i + 1, sweep.objective_trace[i], sweep.weight_norms[i],
                 sweep.max_abs_delta[i]]
                for i in kept
            ],
        )
        _write_json(
            self.out / "weights.json",
            self.meta(),
            {
                "gamma": rep["gamma"],
                "alpha": rep["alpha"],
                "w_sweep": sweep.weights.w_G.tolist(),
                "w_solution": rep["solution"].w.tolist(),
                "w_true": rep["w_true"].tolist(),
                "solution_ridged": rep["solution"].ridged,
                "solution_residual": rep["solution"].residual,
                "sweep_vs_solve_rel": rep["sweep_vs_solve_rel"],
                "max_delta_at_solution": rep["max_delta_at_solution"],
                "final_objective": rep["final_objective"],
            },
        )
        var_report = variance_experiment(self.cfg, self.scenario)
        _write_json(self.out / "variance.json", self.meta(), var_report)

    def run_greeks(self) -> None:
        sc = self.scenario
        if self._trained is not None:
            gen = self._trained
        else:
            # FD validation is meaningful at any weights; use a seeded
            # random generator rather than paying for training here
            flow_cfg = self.cfg["flow"]
            gen = new_generator(
                sc.channels,
                sc.degree,
                lie_degree=int(flow_cfg["lie_degree"]),
                n_proxy_features=int(flow_cfg["proxy_features"]),
                phase_powers=int(flow_cfg["phase_powers"]),
                clock_rate=1.0 / sc.sig_config.time_scale,
                seed=derive_seed(self.seed, "greeks-generator"),
                init_scale=0.3,
            )
        rows = greeks_fd_report(self.cfg, sc, gen)
        _write_csv(
            self.out / "greeks.csv",
            self.header(),
            list(rows[0].keys()),
            [list(r.values()) for r in rows],
        )
        _write_json(self.out / "risk.json", self.meta(), risk_report(self.cfg, sc))

    def run_analysis(self) -> None:
        sc = self.scenario
        cfg_a = self.cfg["analysis"]
        out = self.out / "analysis"
        out.mkdir(parents=True, exist_ok=True)
        gamma = float(self.cfg["td"]["gamma"])
        metric = sc.terminal_metric()

        con = contraction_check(
            metric, gamma,
            n_trials=int(cfg_a["contraction_trials"]),
            seed=derive_seed(self.seed, "contraction"),
        )
        _write_csv(
            out / "contraction.csv",
            self.header(),
            list(con.keys()),
            [list(con.values())],
        )

        rng = np.random.default_rng(derive_seed(self.seed, "fixed-point"))
        fp = fixed_point_iterate(
            reward=0.3,
            gamma=gamma,
            next_features=rng.normal(size=metric.dim),
            eta0=ReturnLaw(rng.normal(), rng.normal(size=metric.dim)),
            metric=metric,
            tol=float(cfg_a["fixed_point_tol"]),
        )
        _write_csv(
            out / "fixed_point.csv",
            self.header(),
            ["gamma", "iterations", "fitted_rate"],
            [[gamma, fp.iterations, fp.fitted_rate]],
        )

        gen = self.trained_generator()
        decay = forecast_decay(
            gen, sc.nmap, metric, sc.env, sc.junction(), sc.grid,
            int(self.cfg["train"]["ensemble_size"]),
            [derive_seed(self.seed, f"decay-{i}") for i in range(int(cfg_a["decay_seeds"]))],
            sc.sig_config,
        )
        _write_csv(
            out / "forecast_decay.csv",
            self.header(),
            ["s", "error", "q_norm"],
            list(zip(decay["s"], decay["error"], decay["q_norms"])),
        )

        stress = whitened_norm_stress(
            sc.env, sc.junction(), sc.grid,
            int(self.cfg["train"]["ensemble_size"]),
            derive_seed(self.seed, "stress"),
            sc.sig_config, sc.nmap, metric,
            scales=tuple(cfg_a["stress_scales"]),
            n_groups=int(cfg_a["stress_groups"]),
        )
        _write_csv(
            out / "norm_stress.csv",
            self.header(),
            list(stress[0].keys()),
            [list(r.values()) for r in stress],
        )

        lam = lyapunov_estimate(
            sc.env, sc.junction(), sc.grid,
            [derive_seed(self.seed, f"lyap-{i}") for i in range(8)],
            sc.sig_config,
            nmap=sc.nmap if sc.env.has_memory else None,
        )
        summary = {
            "contraction": {
                "max_ratio": con["max_ratio"],
                "gamma": gamma,
                "pass": con["max_ratio"] <= gamma + 1e-9,
            },
            "fixed_point": {
                "fitted_rate": fp.fitted_rate,
                "pass": fp.fitted_rate is not None and abs(fp.fitted_rate - gamma) <= 0.02,
            },
            "forecast_decay": {
                "beta": decay["beta"],
                "max_q_norm": decay["max_q_norm"],
                "bounded": bool(np.isfinite(decay["max_q_norm"])),
            },
            "norm_stress": {
                "raw_growth": stress[-1]["raw_growth"],
                "whitened_growth": stress[-1]["whitened_growth"],
                "pass": stress[-1]["whitened_growth"] < stress[-1]["raw_growth"],
            },
            "lyapunov_exponent": lam,
        }
        _write_json(self.out / "summary.json", self.meta(), summary)

    def run_all(self) -> None:
        self.run_scf()
        self.run_td()
        self.run_greeks()
        self.run_analysis()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siglearn",
        description="Signature-proxy value learning experiments",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS + ("print-config",))
    parser.add_argument("--config", default=None, help="INI config path (built-in baseline if omitted)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default="out")
    parser.add_argument(
        "--threads", type=int, default=1,
        help="accepted for compatibility; results never depend on it",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.subcommand == "print-config":
        sys.stdout.write(default_config_text())
        return 0
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    runner = Runner(cfg, args.seed, Path(args.out_dir), args.subcommand)
    try:
        {
            "run-scf": runner.run_scf,
            "run-td": runner.run_td,
            "run-greeks": runner.run_greeks,
            "run-analysis": runner.run_analysis,
            "run-all": runner.run_all,
        }[args.subcommand]()
    except DivergenceError as exc:
        trace_path = Path(args.out_dir) / "error.json"
        _write_json(trace_path, runner.meta(), {"error": str(exc), "context": exc.context})
        print(f"numeric divergence: {exc} (trace in {trace_path})", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
