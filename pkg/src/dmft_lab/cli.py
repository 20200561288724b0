"""Experiment orchestration: declarative configs in, persisted artifacts out.

Configs are JSON; every physical quantity is in flow-time units.  A single
master seed fans into labeled substreams, and replicate j of a simulation
uses master_seed + j.  All numeric artifacts are pure functions of the
config, so reruns reproduce them byte for byte at a fixed worker count.

Exit codes: 0 all checks passed, 2 a metric threshold failed, 1 config or
execution error.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

MODES = ("simulate", "dmft", "amp_oracle", "stationary", "compare", "full_pipeline")
_GRID_MODES = ("simulate", "dmft", "amp_oracle", "full_pipeline")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
OUTPUT_ENV = "DMFT_LAB_OUT"


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class ExperimentConfig:
    name: str
    mode: str
    model: dict
    lam: dict
    population: dict | None
    k: int
    delta: float | None
    n: int | None
    d_list: list[int]
    eta: float | None
    horizon: float | None
    mc_paths: int
    master_seed: int
    n_design_seeds: int
    design_dist: str
    observe_times: list[float]
    n_samples: int
    thresholds: dict
    stationary: dict
    compare: dict
    output_dir: str | None
    emit_plots: bool = True

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "mode": self.mode,
            "model": self.model,
            "lambda": self.lam,
            "population": self.population,
            "dims": {"k": self.k, "delta": self.delta, "n": self.n, "d": self.d_list},
            "grid": {"eta": self.eta, "T": self.horizon},
            "mc_paths": self.mc_paths,
            "seeds": {"master": self.master_seed, "n_design_seeds": self.n_design_seeds},
            "design_dist": self.design_dist,
            "observe_times": self.observe_times,
            "n_samples": self.n_samples,
            "thresholds": self.thresholds,
            "stationary": self.stationary,
            "compare": self.compare,
            "output_dir": self.output_dir,
            "emit_plots": self.emit_plots,
        }
        return out


def _typed(obj: dict, path: str, key: str, kinds, default=None, required=False):
    if key not in obj or obj[key] is None:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
        return default
    val = obj[key]
    if kinds is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kinds):
        want = kinds.__name__ if isinstance(kinds, type) else "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{path}.{key}" if path else key, f"expected {want}")
    return val


def validate_config(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("$", "config must be a JSON object")
    mode = _typed(obj, "", "mode", str, required=True)
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}")
    name = _typed(obj, "", "name", str, default="run")

    dims = _typed(obj, "", "dims", dict, default={})
    k = int(_typed(dims, "dims", "k", int, default=1))
    if k < 1:
        raise ConfigError("dims.k", "must be a positive integer")
    delta = _typed(dims, "dims", "delta", (int, float), default=None)
    n = _typed(dims, "dims", "n", int, default=None)
    d_raw = dims.get("d")
    if d_raw is None:
        d_list: list[int] = []
    elif isinstance(d_raw, int):
        d_list = [d_raw]
    elif isinstance(d_raw, list) and all(isinstance(v, int) for v in d_raw):
        d_list = list(d_raw)
    else:
        raise ConfigError("dims.d", "expected an integer or a list of integers")
    if any(d < 1 for d in d_list):
        raise ConfigError("dims.d", "dimensions must be positive")
    if n is not None and len(d_list) == 1:
        implied = n / d_list[0]
        if delta is not None and abs(implied - float(delta)) > 1e-12:
            raise ConfigError("dims.delta", f"n/d = {implied!r} disagrees with delta = {delta!r}")
        delta = implied
    if n is not None and len(d_list) > 1:
        raise ConfigError("dims.n", "give delta instead of n when sweeping several d values")
    if delta is not None and float(delta) <= 0:
        raise ConfigError("dims.delta", "must be positive")

    grid = _typed(obj, "", "grid", dict, default={})
    eta = _typed(grid, "grid", "eta", (int, float), default=None)
    horizon = _typed(grid, "grid", "T", (int, float), default=None)
    if mode in _GRID_MODES:
        if eta is None:
            raise ConfigError("grid.eta", "missing required field")
        if not float(eta) > 0:
            raise ConfigError("grid.eta", "must be > 0")
        if horizon is None:
            raise ConfigError("grid.T", "missing required field")
        if float(horizon) < float(eta):
            raise ConfigError("grid.T", "must be at least eta")
        if mode != "dmft" and mode != "amp_oracle" and not d_list:
            raise ConfigError("dims.d", "missing required field")
        if delta is None:
            raise ConfigError("dims.delta", "missing required field (or give n with a single d)")

    model = _typed(obj, "", "model", dict, default=None,
                   required=mode not in ("compare",))
    lam = _typed(obj, "", "lambda", (dict, int, float), default=None)
    if isinstance(lam, (int, float)):
        lam = {"kind": "constant", "value": float(lam)}
    if lam is None and mode != "compare":
        raise ConfigError("lambda", "missing required field")

    seeds = _typed(obj, "", "seeds", dict, default={})
    master = int(_typed(seeds, "seeds", "master", int, default=0))
    n_seeds = int(_typed(seeds, "seeds", "n_design_seeds", int, default=1))
    if n_seeds < 1:
        raise ConfigError("seeds.n_design_seeds", "must be at least 1")

    observe = obj.get("observe_times")
    if observe is None:
        observe = []
    if not isinstance(observe, list) or not all(isinstance(v, (int, float)) for v in observe):
        raise ConfigError("observe_times", "expected a list of numbers")

    design_dist = _typed(obj, "", "design_dist", str, default="Gaussian")
    cfg = ExperimentConfig(
        name=name,
        mode=mode,
        model=model,
        lam=lam,
        population=_typed(obj, "", "population", dict, default=None),
        k=k,
        delta=None if delta is None else float(delta),
        n=n,
        d_list=d_list,
        eta=None if eta is None else float(eta),
        horizon=None if horizon is None else float(horizon),
        mc_paths=int(_typed(obj, "", "mc_paths", int, default=20000)),
        master_seed=master,
        n_design_seeds=n_seeds,
        design_dist=design_dist,
        observe_times=[float(t) for t in observe],
        n_samples=int(_typed(obj, "", "n_samples", int, default=20000)),
        thresholds=_typed(obj, "", "thresholds", dict, default={}),
        stationary=_typed(obj, "", "stationary", dict, default={}),
        compare=_typed(obj, "", "compare", dict, default={}),
        output_dir=_typed(obj, "", "output_dir", str, default=None),
        emit_plots=bool(obj.get("emit_plots", True)),
    )
    if mode == "stationary" and cfg.delta is None:
        raise ConfigError("dims.delta", "missing required field")
    if mode == "compare":
        for key in ("cloud_a", "cloud_b"):
            _typed(cfg.compare, "compare", key, str, required=True)
    return cfg


@dataclass
class RunReport:
    config: dict
    fingerprint: dict
    wall_times: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    verdict: str = "pass"

    @property
    def exit_code(self) -> int:
        return 0 if self.verdict == "pass" else 2

    def add_metric(self, name: str, value: float, threshold=None, higher_is_bad=True) -> None:
        passed = True
        if threshold is not None:
            passed = (value <= threshold) if higher_is_bad else (value >= threshold)
        self.metrics.append(
            {"name": name, "value": value, "threshold": threshold, "passed": bool(passed)}
        )
        if not passed:
            self.verdict = "metric_failure"

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "fingerprint": self.fingerprint,
                "wall_times": self.wall_times,
                "metrics": self.metrics,
                "artifacts": self.artifacts,
                "verdict": self.verdict,
            },
            indent=2,
            sort_keys=True,
        )


def _fingerprint() -> dict:
    from . import __version__

    import numpy
    import scipy

    rev = None
    try:
        proc = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if proc.returncode == 0:
            rev = proc.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = None
    return {
        "package_version": __version__,
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "python": sys.version.split()[0],
        "git_rev": rev,
    }


def _resolve_out(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        root = Path(override)
    elif cfg.output_dir:
        root = Path(cfg.output_dir)
    elif os.environ.get(OUTPUT_ENV):
        root = Path(os.environ[OUTPUT_ENV]) / cfg.name
    else:
        root = Path("runs") / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    return root


def _build_pieces(cfg: ExperimentConfig):
    from .design import population_from_dict, standard_population
    from .losses import lambda_from_dict, loss_from_dict

    model = loss_from_dict(cfg.model)
    if model.k != cfg.k:
        raise ConfigError("dims.k", f"model has k={model.k}, dims.k={cfg.k}")
    lam_path = lambda_from_dict(cfg.lam, k=model.k)
    if cfg.population is not None:
        pop = population_from_dict(cfg.population)
    else:
        pop = standard_population(model.k, noise="gaussian")
    if pop.k() != model.k:
        raise ConfigError("population", f"population k={pop.k()} mismatches model k={model.k}")
    return model, lam_path, pop


def _write_cloud(points, label: str, path: Path) -> None:
    from .metrics import SampleCloud, cloud_to_csv

    cloud_to_csv(SampleCloud(points, label=label), str(path))


def _stage_simulate(cfg: ExperimentConfig, out: Path, report: RunReport) -> dict:
    import numpy as np

    from .design import sample_design, sample_population
    from .flow import TimeGrid, empirical_kernel, empirical_marginal, run_flow_euler
    from .kernels import BlockKernel, write_kernel_csv
    from .losses import ConstantLambdaPath

    model, lam_path, pop = _build_pieces(cfg)
    planted = pop.planted_law is not None
    grid = TimeGrid.from_horizon(cfg.eta, cfg.horizon)
    observe = cfg.observe_times or [grid.horizon]
    kernels_by_d: dict[int, BlockKernel] = {}
    clouds_by_d: dict[int, list] = {}
    for d in cfg.d_list:
        n = cfg.n if cfg.n is not None else int(round(cfg.delta * d))
        mean_blocks = None
        mean_star = None
        mean_ss = None
        clouds_by_d[d] = []
        for j in range(cfg.n_design_seeds):
            seed = cfg.master_seed + j
            dm = sample_design(n, d, cfg.design_dist, seed)
            theta0, theta_star, z = sample_population(pop, d, n, model.k, seed)
            traj = run_flow_euler(
                dm,
                theta0,
                theta_star if planted else None,
                z,
                model,
                lam_path,
                grid,
            )
            kern = empirical_kernel(traj)
            path = out / f"emp_C_theta_d{d}_seed{j}.csv"
            write_kernel_csv(kern, str(path), kind="C_theta_empirical", seed=seed)
            report.artifacts.append(str(path))
            mean_blocks = kern.blocks if mean_blocks is None else mean_blocks + kern.blocks
            if kern.has_star:
                mean_star = kern.star_cols if mean_star is None else mean_star + kern.star_cols
                mean_ss = kern.star_star if mean_ss is None else mean_ss + kern.star_star
            marg = empirical_marginal(traj, observe, "theta_rows")
            cpath = out / f"emp_theta_cloud_d{d}_seed{j}.csv"
            _write_cloud(marg, f"empirical:d={d}:seed={seed}", cpath)
            report.artifacts.append(str(cpath))
            clouds_by_d[d].append(marg)
            if j == 0 and model.name == "zero" and isinstance(lam_path, ConstantLambdaPath):
                decay = np.eye(model.k)
                step = np.eye(model.k) - grid.eta * lam_path.matrix
                worst = 0.0
                for i in range(grid.m + 1):
                    ref = traj.theta_at(0) @ decay
                    worst = max(worst, float(np.max(np.abs(traj.theta_at(i) - ref))))
                    decay = decay @ step
                report.add_metric("exact_decay_sup_err", worst, threshold=1e-8)
        ns = cfg.n_design_seeds
        mean = BlockKernel(
            grid=grid,
            k=model.k,
            blocks=mean_blocks / ns,
            star_cols=None if mean_star is None else mean_star / ns,
            star_star=None if mean_ss is None else mean_ss / ns,
        )
        kernels_by_d[d] = mean
        path = out / f"emp_C_theta_d{d}_mean.csv"
        write_kernel_csv(mean, str(path), kind="C_theta_empirical_mean", seed=cfg.master_seed)
        report.artifacts.append(str(path))
    return {
        "kernels_by_d": kernels_by_d,
        "clouds_by_d": clouds_by_d,
        "observe": observe,
        "grid": grid,
    }


def _solver_stage(cfg: ExperimentConfig, out: Path, report: RunReport, which: str):
    from .dmft import sample_dmft_paths, solve_dmft_discrete
    from .flow import TimeGrid
    from .kernels import write_kernel_csv

    model, lam_path, pop = _build_pieces(cfg)
    planted = pop.planted_law is not None
    grid = TimeGrid.from_horizon(cfg.eta, cfg.horizon)
    if which == "dmft":
        sol = solve_dmft_discrete(
            model, lam_path, pop, cfg.delta, grid, cfg.mc_paths, cfg.master_seed, planted
        )
    else:
        from .amp import solve_amp_se

        sol = solve_amp_se(
            model, lam_path, pop, cfg.delta, grid, cfg.mc_paths, cfg.master_seed, planted
        )
    tag = "dmft" if which == "dmft" else "amp"
    for attr, kern in (
        ("C_theta", sol.theta_kernel()),
        ("C_ell", sol.ell_kernel()),
        ("R_theta", sol.theta_response()),
        ("R_ell", sol.ell_response()),
    ):
        path = out / f"{tag}_{attr}.csv"
        write_kernel_csv(kern, str(path), kind=f"{attr}_{tag}", seed=cfg.master_seed)
        report.artifacts.append(str(path))
    gpath = out / f"{tag}_gamma.csv"
    with open(gpath, "w") as fh:
        fh.write("step,time,a,b,value\n")
        for i in range(grid.m + 1):
            for a in range(sol.k):
                for b in range(sol.k):
                    fh.write(
                        f"{i},{grid.times[i]:.17g},{a},{b},{sol.Gamma[i, a, b]:.17g}\n"
                    )
    report.artifacts.append(str(gpath))

    observe = cfg.observe_times or [grid.horizon]
    if which == "dmft" and cfg.n_samples > 0:
        paths = sample_dmft_paths(
            sol, model, lam_path, pop, cfg.delta, cfg.n_samples, cfg.master_seed
        )
        knots = [grid.index_of(t) for t in observe]
        cloud = paths["theta"][:, knots, :].reshape(cfg.n_samples, -1)
        cpath = out / "dmft_theta_cloud.csv"
        _write_cloud(cloud, "dmft_samples", cpath)
        report.artifacts.append(str(cpath))
    return sol, observe


def _stage_stationary(cfg: ExperimentConfig, out: Path, report: RunReport) -> dict:
    import numpy as np

    from .design import population_from_dict
    from .losses import lambda_from_dict, loss_from_dict
    from .stationary import ExpectationConfig, gordon_residual, logistic_sur_candes, solve_stationary

    model = loss_from_dict(cfg.model)
    lam_path = lambda_from_dict(cfg.lam, k=model.k)
    lam_mat = lam_path.eval(0.0)
    if not np.allclose(lam_mat, lam_mat[0, 0] * np.eye(model.k)):
        raise ConfigError("lambda", "stationary mode needs a constant scalar ridge level")
    lam_scalar = float(lam_mat[0, 0])
    opts = cfg.stationary
    gamma2 = opts.get("gamma2")
    noise_law = None
    if cfg.population is not None:
        pop = population_from_dict(cfg.population)
        noise_law = pop.noise_law
        if gamma2 is None:
            gamma2 = float(pop.star_second_moment()[0, 0]) if model.k == 1 else None
    star = gamma2 if gamma2 is not None else 0.0
    exp_cfg = ExpectationConfig(
        method=opts.get("method", "quadrature"),
        gh_nodes=int(opts.get("gh_nodes", 41)),
        mc_samples=int(opts.get("mc_samples", 200000)),
        seed=cfg.master_seed,
        noise_law=noise_law,
    )
    sp = solve_stationary(
        model,
        lam_scalar,
        cfg.delta,
        star if model.k == 1 else np.asarray(star, dtype=float),
        exp_cfg,
        damping=float(opts.get("damping", 0.5)),
        tol=float(opts.get("tol", 1e-10)),
        max_iter=int(opts.get("max_iter", 500)),
    )
    payload = {
        "R_ell_inf": sp.R_ell_inf.tolist(),
        "R_theta_inf": sp.R_theta_inf.tolist(),
        "R_ell_star": sp.R_ell_star.tolist(),
        "C_theta_inf": sp.C_theta_inf.tolist(),
        "C_ell_inf": sp.C_ell_inf.tolist(),
        "gamma_inf": None if sp.gamma_inf is None else sp.gamma_inf.tolist(),
        "residual": sp.residual,
        "iterations": sp.iterations,
        "trace_tail": sp.trace[-5:],
    }
    report.add_metric("stationary_residual", sp.residual, threshold=float(opts.get("tol", 1e-10)) * 10)
    if model.k == 1:
        res, mapped = gordon_residual(sp, model, lam_scalar, cfg.delta, exp_cfg)
        payload["gordon_residuals"] = res.tolist()
        payload["gordon_mapped"] = mapped
        for idx, val in enumerate(res, start=1):
            report.add_metric(
                f"gordon_residual_{idx}", float(val), threshold=opts.get("gordon_threshold")
            )
    if opts.get("sur_candes"):
        point, _ = logistic_sur_candes(cfg.delta, float(star), exp_cfg)
        payload["sur_candes"] = {
            "alpha": point.alpha,
            "sigma": point.sigma,
            "lambda_par": point.lambda_par,
            "kappa": point.kappa,
            "gamma": point.gamma,
        }
    path = out / "stationary.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    report.artifacts.append(str(path))
    return payload


def _stage_compare(cfg: ExperimentConfig, out: Path, report: RunReport) -> dict:
    from .metrics import cloud_from_csv, sliced_w2, wasserstein2_1d

    a = cloud_from_csv(cfg.compare["cloud_a"])
    b = cloud_from_csv(cfg.compare["cloud_b"])
    n_dirs = int(cfg.compare.get("n_directions", 256))
    seed = int(cfg.compare.get("seed", cfg.master_seed))
    if a.dim == 1 and b.dim == 1:
        value = wasserstein2_1d(a, b)
        metric = "wasserstein2_1d"
    else:
        value = sliced_w2(a, b, n_directions=n_dirs, seed=seed)
        metric = "sliced_w2"
    threshold = cfg.compare.get("threshold")
    report.add_metric(metric, value, threshold=threshold)
    payload = {
        "metric": metric,
        "value": value,
        "threshold": threshold,
        "cloud_a": {"path": cfg.compare["cloud_a"], "n": a.n, "dim": a.dim, "label": a.label},
        "cloud_b": {"path": cfg.compare["cloud_b"], "n": b.n, "dim": b.dim, "label": b.label},
        "n_directions": n_dirs,
        "seed": seed,
    }
    path = out / "compare.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    report.artifacts.append(str(path))
    return payload


def _stage_metrics(cfg, out, report, sim, sol, observe) -> None:
    import numpy as np

    from .metrics import SampleCloud, kernel_sup_diff, sliced_w2

    thresholds = cfg.thresholds
    rows = []
    sup_by_d = {}
    for d, kern in sim["kernels_by_d"].items():
        sup, arg = kernel_sup_diff(kern, sol.theta_kernel())
        sup_by_d[d] = sup
        rows.append({"kind": "kernel_sup", "d": d, "value": sup, "argmax": list(arg)})
    if sup_by_d:
        d_max = max(sup_by_d)
        report.add_metric(
            f"kernel_sup_d{d_max}", sup_by_d[d_max], threshold=thresholds.get("kernel_sup")
        )
        if len(sup_by_d) > 1 and thresholds.get("kernel_sup_decreasing", False):
            ds = sorted(sup_by_d)
            dec = all(sup_by_d[a] >= sup_by_d[b] for a, b in zip(ds, ds[1:]))
            report.add_metric("kernel_sup_decreasing", float(dec), threshold=1.0, higher_is_bad=False)

    grid = sim["grid"]
    knots = [grid.index_of(t) for t in observe]
    cloud_path = out / "dmft_theta_cloud.csv"
    if cloud_path.exists():
        from .metrics import cloud_from_csv

        ref = cloud_from_csv(str(cloud_path))
        k = sol.k
        for d, margs in sim["clouds_by_d"].items():
            per_seed = []
            for marg in margs:
                val = sliced_w2(
                    SampleCloud(marg, label=f"d={d}"),
                    ref,
                    n_directions=int(thresholds.get("n_directions", 128)),
                    seed=cfg.master_seed,
                )
                per_seed.append(val)
            rows.append({"kind": "sliced_w2", "d": d, "value": float(np.mean(per_seed)),
                         "per_seed": per_seed})
            for t_idx, t in enumerate(observe):
                ref_col = ref.points[:, t_idx * k : (t_idx + 1) * k]
                per_time = [
                    sliced_w2(
                        SampleCloud(marg[:, t_idx * k : (t_idx + 1) * k]),
                        SampleCloud(ref_col),
                        n_directions=int(thresholds.get("n_directions", 128)),
                        seed=cfg.master_seed,
                    )
                    for marg in margs
                ]
                rows.append({"kind": "w2_time", "d": d, "time": t,
                             "value": float(np.mean(per_time))})
        w2_rows = [r for r in rows if r["kind"] == "sliced_w2"]
        if len(w2_rows) > 1 and thresholds.get("w2_decreasing", False):
            by_d = sorted(w2_rows, key=lambda r: r["d"])
            dec = all(a["value"] >= b["value"] for a, b in zip(by_d, by_d[1:]))
            report.add_metric("w2_decreasing", float(dec), threshold=1.0, higher_is_bad=False)
    path = out / "metrics.json"
    path.write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True))
    report.artifacts.append(str(path))


def run_experiment(config, out_dir: str | None = None) -> RunReport:
    """Execute the configured pipeline; returns the report (also persisted)."""
    cfg = config if isinstance(config, ExperimentConfig) else validate_config(config)
    out = _resolve_out(cfg, out_dir)
    report = RunReport(config=cfg.to_dict(), fingerprint=_fingerprint())
    (out / "config_echo.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    report.artifacts.append(str(out / "config_echo.json"))

    meta = {
        "name": cfg.name,
        "mode": cfg.mode,
        "k": cfg.k,
        "eta": cfg.eta,
        "T": cfg.horizon,
        "observe_times": cfg.observe_times,
        "d_values": cfg.d_list,
        "design_seeds": cfg.n_design_seeds,
        "master_seed": cfg.master_seed,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    report.artifacts.append(str(out / "meta.json"))

    def timed(stage, fn, *args):
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except ConfigError:
            raise
        except Exception as exc:
            raise RuntimeError(f"stage {stage} failed: {exc}") from exc
        report.wall_times[stage] = time.perf_counter() - t0
        return result

    sim = sol = None
    observe = cfg.observe_times
    if cfg.mode in ("simulate", "full_pipeline"):
        sim = timed("simulate", _stage_simulate, cfg, out, report)
        observe = sim["observe"]
    if cfg.mode in ("dmft", "full_pipeline"):
        sol, observe = timed("dmft", _solver_stage, cfg, out, report, "dmft")
    if cfg.mode in ("amp_oracle", "full_pipeline"):
        amp_sol, observe = timed("amp", _solver_stage, cfg, out, report, "amp")
        if sol is not None:
            import numpy as np

            diff = max(
                float(np.max(np.abs(sol.C_theta - amp_sol.C_theta))),
                float(np.max(np.abs(sol.C_ell - amp_sol.C_ell))),
                float(np.max(np.abs(sol.R_theta - amp_sol.R_theta))),
                float(np.max(np.abs(sol.R_ell - amp_sol.R_ell))),
            )
            report.add_metric(
                "amp_dmft_max_kernel_diff", diff, threshold=cfg.thresholds.get("amp_oracle", 1e-8)
            )
    if cfg.mode == "stationary":
        timed("stationary", _stage_stationary, cfg, out, report)
    if cfg.mode == "compare":
        timed("compare", _stage_compare, cfg, out, report)
    if cfg.mode == "full_pipeline" and sim is not None and sol is not None:
        timed("metrics", _stage_metrics, cfg, out, report, sim, sol, observe)

    if cfg.emit_plots and cfg.mode in ("simulate", "dmft", "amp_oracle", "full_pipeline"):
        written = timed("plots", emit_plot_data, str(out))
        report.artifacts.extend(written)

    (out / "report.json").write_text(report.to_json())
    return report


# ---------------------------------------------------------------------------
# plot-ready data


def _read_kernel_diag(path: Path):
    from .kernels import read_kernel_csv

    kern = read_kernel_csv(str(path))
    times = kern.grid.times
    import numpy as np

    diag = np.array([np.linalg.norm(kern.blocks[i, i], 2) for i in range(kern.grid.m + 1)])
    return times, diag


def emit_plot_data(report_dir: str) -> list:
    """Tidy CSVs (and figures) derived from a completed run directory.

    Emits series for the kernel diagonal, marginal QQ pairs, and W2-vs-d
    curves, depending on which artifacts the run produced.  Raises
    FileNotFoundError naming the missing inputs when the directory holds
    none of the expected artifacts.
    """
    out = Path(report_dir)
    meta_path = out / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing artifacts: {meta_path}")
    meta = json.loads(meta_path.read_text())
    written: list[str] = []

    diag_series = []
    for path in sorted(out.glob("emp_C_theta_d*_mean.csv")):
        d = path.stem.split("_d")[1].split("_")[0]
        times, diag = _read_kernel_diag(path)
        diag_series.append((f"empirical_d{d}", times, diag))
    for tag in ("dmft", "amp"):
        path = out / f"{tag}_C_theta.csv"
        if path.exists():
            times, diag = _read_kernel_diag(path)
            diag_series.append((tag, times, diag))
    qq_inputs = sorted(out.glob("emp_theta_cloud_d*_seed0.csv"))
    dmft_cloud = out / "dmft_theta_cloud.csv"
    metrics_path = out / "metrics.json"
    if not diag_series and not qq_inputs and not metrics_path.exists():
        raise FileNotFoundError(
            "missing artifacts: expected one of "
            f"{out / 'emp_C_theta_d*_mean.csv'}, {out / 'dmft_C_theta.csv'}, "
            f"{out / 'metrics.json'}"
        )

    if diag_series:
        path = out / "plot_ctheta_diag.csv"
        with open(path, "w") as fh:
            fh.write("time,series,value\n")
            for label, times, diag in diag_series:
                for t, v in zip(times, diag):
                    fh.write(f"{t:.17g},{label},{v:.17g}\n")
        written.append(str(path))
        from .report import fig_ctheta_diag

        written.append(fig_ctheta_diag(diag_series, str(out / "plot_ctheta_diag.png")))

    if qq_inputs and dmft_cloud.exists():
        import numpy as np

        from .metrics import cloud_from_csv

        ref = cloud_from_csv(str(dmft_cloud))
        emp = cloud_from_csv(str(qq_inputs[-1]))
        k = int(meta.get("k", 1))
        obs = meta.get("observe_times") or [None]
        levels = (np.arange(99) + 1.0) / 100.0
        pairs = []
        n_cols = min(emp.dim, ref.dim)
        for t_idx, t in enumerate(obs):
            col = t_idx * k
            if col >= n_cols:
                break
            eq = np.quantile(emp.points[:, col], levels)
            rq = np.quantile(ref.points[:, col], levels)
            pairs.append((t if t is not None else float(t_idx), levels, eq, rq))
        path = out / "plot_qq.csv"
        with open(path, "w") as fh:
            fh.write("time,quantile,empirical_value,solver_value\n")
            for t, levels_, eq, rq in pairs:
                for q, e, r in zip(levels_, eq, rq):
                    fh.write(f"{t:.17g},{q:.17g},{e:.17g},{r:.17g}\n")
        written.append(str(path))
        from .report import fig_qq

        written.append(fig_qq(pairs, str(out / "plot_qq.png")))

    if metrics_path.exists():
        rows = json.loads(metrics_path.read_text()).get("rows", [])
        w2_rows = [r for r in rows if r.get("kind") == "w2_time"]
        if w2_rows:
            path = out / "plot_w2_vs_d.csv"
            with open(path, "w") as fh:
                fh.write("time,d,value\n")
                for r in sorted(w2_rows, key=lambda r: (r["time"], r["d"])):
                    fh.write(f"{r['time']:.17g},{r['d']},{r['value']:.17g}\n")
            written.append(str(path))
            from .report import fig_w2_vs_d

            written.append(fig_w2_vs_d(w2_rows, str(out / "plot_w2_vs_d.png")))

    gamma_path = out / "dmft_gamma.csv"
    if gamma_path.exists():
        import numpy as np

        raw = np.loadtxt(gamma_path, delimiter=",", skiprows=1, ndmin=2)
        from .report import fig_gamma

        written.append(fig_gamma(raw[:, 1], raw[:, 4], str(out / "plot_gamma.png")))
    return written


# ---------------------------------------------------------------------------
# entry point


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="dmft-lab",
        description="Run simulation / solver / comparison experiments from a JSON config.",
    )
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="path to the JSON experiment config")
    parser.add_argument("--out", help="output directory (overrides config and environment)")
    parser.add_argument("--threads", type=int, help="cap numeric library worker threads")
    parser.add_argument("--no-plots", action="store_true", help="skip figure emission")
    # direct flags for the stationary and compare modes, bypassing a config file
    parser.add_argument("--loss", help="loss name, e.g. glm:Linear+Square")
    parser.add_argument("--delta", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--gamma2", type=float)
    parser.add_argument("--tol", type=float)
    parser.add_argument("--damping", type=float)
    parser.add_argument("--noise", choices=("none", "gaussian", "logistic"))
    parser.add_argument("--cloud-a")
    parser.add_argument("--cloud-b")
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--directions", type=int)
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args(argv)


def _config_from_flags(args) -> dict:
    if args.mode == "stationary":
        if args.loss is None or args.delta is None or args.lam is None:
            raise ConfigError("mode", "stationary without --config needs --loss, --delta, --lambda")
        stationary = {}
        if args.tol is not None:
            stationary["tol"] = args.tol
        if args.damping is not None:
            stationary["damping"] = args.damping
        if args.gamma2 is not None:
            stationary["gamma2"] = args.gamma2
        cfg = {
            "name": "stationary",
            "mode": "stationary",
            "model": {"name": args.loss},
            "lambda": args.lam,
            "dims": {"k": 1, "delta": args.delta},
            "seeds": {"master": args.seed},
            "stationary": stationary,
        }
        if args.noise is not None and args.noise != "none":
            cfg["population"] = {
                "init": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
                "noise": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]}
                if args.noise == "gaussian"
                else {"kind": "logistic", "scale": 1.0},
                "planted": None,
            }
        return cfg
    if args.mode == "compare":
        if args.cloud_a is None or args.cloud_b is None:
            raise ConfigError("mode", "compare without --config needs --cloud-a and --cloud-b")
        compare = {"cloud_a": args.cloud_a, "cloud_b": args.cloud_b}
        if args.threshold is not None:
            compare["threshold"] = args.threshold
        if args.directions is not None:
            compare["n_directions"] = args.directions
        return {
            "name": "compare",
            "mode": "compare",
            "seeds": {"master": args.seed},
            "compare": compare,
        }
    raise ConfigError("mode", f"mode {args.mode} requires --config")


def main(argv=None) -> int:
    args = _parse_args(sys.argv[1:] if argv is None else argv)
    if args.threads is not None and args.threads > 0:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        if args.config is not None:
            with open(args.config) as fh:
                raw = json.load(fh)
            if raw.get("mode") != args.mode:
                raw = dict(raw, mode=args.mode)
            cfg = validate_config(raw)
        else:
            cfg = validate_config(_config_from_flags(args))
        if args.no_plots:
            cfg.emit_plots = False
        report = run_experiment(cfg, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for row in report.metrics:
        status = "pass" if row["passed"] else "FAIL"
        thr = "" if row["threshold"] is None else f" (threshold {row['threshold']})"
        print(f"[{status}] {row['name']} = {row['value']:.6g}{thr}")
    print(f"verdict: {report.verdict}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
