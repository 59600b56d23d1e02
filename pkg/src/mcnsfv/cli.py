"""Command-line front end: configuration, orchestration, reports.

Config files are flat ``key = value`` text with exactly the keys of
RunConfig; unknown keys are rejected so a config hash pins a run.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 property-suite failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields as dc_fields, replace
from pathlib import Path

import numpy as np

from . import mc, storage
from .fields import Field, State, avg, jump, total_energy
from .mesh import build_mesh
from .random_data import EXPERIMENT_IDS, ExperimentModel, draw_sample
from .scheme import (
    FluidParams,
    SchemeConfig,
    SchemeError,
    StepFailure,
    energy_ledger_check,
    residual,
    solve_trajectory,
    upwind_flux,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_PROPERTY = 4


class ConfigError(ValueError):
    pass


class PropertyFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "steady_state"
    n: int = 64
    dt_factor: float = 1.0
    T: float = 0.1
    epsilon: float = 0.6
    gamma: float = 1.4
    a: float = 1.0
    mu: float = 0.1
    lam: float = 0.0
    half_width: float = 0.1
    N: tuple[int, ...] = (5, 10, 20, 40, 80)
    M: int = 10
    S: int = 512
    seed: int = 20220901
    out_dir: str = "out"
    threads: int = 0  # 0 = automatic


_PARSERS = {
    "experiment": str,
    "n": int,
    "dt_factor": float,
    "T": float,
    "epsilon": float,
    "gamma": float,
    "a": float,
    "mu": float,
    "lam": float,
    "half_width": float,
    "N": lambda s: tuple(int(v) for v in s.split(",") if v.strip()),
    "M": int,
    "S": int,
    "seed": int,
    "out_dir": str,
    "threads": int,
}
# the on-disk key for the bulk viscosity parameter is its usual name
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_KEYS = {f.name: ("lambda" if f.name == "lam" else f.name) for f in dc_fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](val.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for field in dc_fields(RunConfig):
        value = getattr(cfg, field.name)
        if field.name == "N":
            value = ",".join(str(v) for v in value)
        lines.append(f"{_FIELD_KEYS[field.name]} = {value}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: RunConfig) -> None:
    def bad(field, why):
        raise ConfigError(f"{field}: {why}")

    if cfg.experiment not in EXPERIMENT_IDS:
        bad("experiment", f"must be one of {EXPERIMENT_IDS}, got {cfg.experiment!r}")
    if cfg.n < 2:
        bad("n", f"must be >= 2, got {cfg.n}")
    if cfg.epsilon <= -1.0:
        bad("epsilon", f"must be > -1, got {cfg.epsilon}")
    if cfg.T <= 0.0:
        bad("T", f"must be > 0, got {cfg.T}")
    if cfg.dt_factor <= 0.0:
        bad("dt_factor", f"must be > 0, got {cfg.dt_factor}")
    if cfg.gamma <= 1.0:
        bad("gamma", f"must be > 1, got {cfg.gamma}")
    if cfg.a < 0.0:
        bad("a", f"must be >= 0, got {cfg.a}")
    if cfg.mu <= 0.0:
        bad("mu", f"must be > 0, got {cfg.mu}")
    if cfg.lam < 0.0:
        bad("lambda", f"must be >= 0, got {cfg.lam}")
    if cfg.half_width < 0.0:
        bad("half_width", f"must be >= 0, got {cfg.half_width}")
    if not cfg.N:
        bad("N", "needs at least one ensemble size")
    if any(b <= a for a, b in zip(cfg.N, cfg.N[1:])) or cfg.N[0] < 1:
        bad("N", f"must be a strictly increasing list of positive sizes, got {cfg.N}")
    if cfg.M < 1:
        bad("M", f"must be >= 1, got {cfg.M}")
    if cfg.S < 2:
        bad("S", f"must be >= 2, got {cfg.S}")
    if cfg.threads < 0:
        bad("threads", f"must be >= 0, got {cfg.threads}")


def load_config(path: str) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text())


def resolve_threads(cfg: RunConfig, override: int | None) -> int:
    if override is not None:
        return max(1, override)
    env = os.environ.get("MCNSFV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"MCNSFV_THREADS: not an integer: {env!r}") from exc
    if cfg.threads > 0:
        return cfg.threads
    return os.cpu_count() or 1


def scheme_config(cfg: RunConfig) -> SchemeConfig:
    return SchemeConfig(T=cfg.T, epsilon=cfg.epsilon, dt_factor=cfg.dt_factor)


def model_for(cfg: RunConfig) -> ExperimentModel:
    return ExperimentModel(cfg.experiment, seed=cfg.seed, half_width=cfg.half_width)


def base_manifest(cfg: RunConfig, realisation: int, sample_ids: list[int],
                  failed_ids: list[int]) -> dict:
    return {
        "format_version": storage.FORMAT_VERSION,
        "experiment": cfg.experiment,
        "n": cfg.n,
        "dt_factor": cfg.dt_factor,
        "epsilon": cfg.epsilon,
        "gamma": cfg.gamma,
        "a": cfg.a,
        "mu": cfg.mu,
        "lambda": cfg.lam,
        "T": cfg.T,
        "seed": cfg.seed,
        "realisation": realisation,
        "sample_ids": sample_ids,
        "failed_ids": failed_ids,
        "payload_checksums": {},
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_run_sample(cfg: RunConfig, sample_index: int, threads: int) -> int:
    mesh = build_mesh(cfg.n, 2)
    model = model_for(cfg)
    sample = draw_sample(model, sample_index, mu=cfg.mu, lam=cfg.lam)
    t0 = time.perf_counter()
    traj = solve_trajectory(sample, mesh, scheme_config(cfg), a=cfg.a, gamma=cfg.gamma)
    elapsed = time.perf_counter() - t0
    params = FluidParams(mu=cfg.mu, lam=cfg.lam, gamma=cfg.gamma, a=cfg.a)
    report = energy_ledger_check(traj, params)

    mass0 = mesh.cell_volume * traj.states[0].rho.values.sum()
    mass_t = mesh.cell_volume * traj.terminal.rho.values.sum()
    energy0 = total_energy(traj.states[0], cfg.a, cfg.gamma)
    out = Path(cfg.out_dir) / "samples" / f"{cfg.experiment}_{sample_index:05d}"
    out.mkdir(parents=True, exist_ok=True)
    values = np.concatenate(
        [traj.terminal.rho.flat()[:, None], traj.terminal.mom.flat()], axis=1
    )
    name = "terminal.fvf1"
    storage.write_payload(out / name, values, mesh.d, mesh.n)
    manifest = base_manifest(cfg, realisation=0, sample_ids=[sample_index], failed_ids=[])
    manifest["payload_checksums"] = {name: storage.sha256_file(out / name)}
    storage.write_manifest(out, manifest)

    print(f"sample {sample_index}: {traj.n_steps} steps in {elapsed:.2f}s")
    print(f"  mass drift       {abs(mass_t - mass0) / mass0:.3e} relative")
    print(f"  energy drift     {report.energies[-1] - energy0:+.3e} "
          f"(dissipated {np.sum(report.dissipations[1:]):.3e})")
    print(f"  min density      {min(d.min_density for d in traj.diagnostics):.6f}")
    print(f"  ledger           {'ok' if report.ok else 'VIOLATED'} "
          f"(worst slack {report.worst_slack:+.3e})")
    print(f"  wrote {out / name}")
    return EXIT_OK


def cmd_reference(cfg: RunConfig, threads: int) -> int:
    mesh = build_mesh(cfg.n, 2)
    model = model_for(cfg)
    t0 = time.perf_counter()
    ens = mc.run_ensemble(model, mesh, scheme_config(cfg), a=cfg.a, gamma=cfg.gamma,
                          N=cfg.S, realisation=mc.REFERENCE_REALISATION,
                          mu=cfg.mu, lam=cfg.lam, threads=threads)
    ref = mc.reference_stats(ens, mesh)
    out = Path(cfg.out_dir) / "reference"
    manifest = base_manifest(cfg, realisation=mc.REFERENCE_REALISATION,
                             sample_ids=ens.sample_ids, failed_ids=ens.failed_ids)
    mc.save_reference(out, ref, manifest)
    print(f"reference: S={len(ens.states)} samples ({len(ens.failed_ids)} failed) "
          f"in {time.perf_counter() - t0:.1f}s -> {out}")
    return EXIT_OK


def cmd_mc(cfg: RunConfig, realisation: int, num_samples: int | None, threads: int) -> int:
    mesh = build_mesh(cfg.n, 2)
    model = model_for(cfg)
    n_samples = num_samples if num_samples is not None else max(cfg.N)
    ens = mc.run_ensemble(model, mesh, scheme_config(cfg), a=cfg.a, gamma=cfg.gamma,
                          N=n_samples, realisation=realisation,
                          mu=cfg.mu, lam=cfg.lam, threads=threads)
    out = Path(cfg.out_dir) / "ensembles" / f"r{realisation:03d}_N{n_samples:05d}"
    mc.save_ensemble(out, ens, mesh)
    print(f"ensemble: realisation {realisation}, N={n_samples} "
          f"({len(ens.failed_ids)} failed) -> {out}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, threads: int) -> int:
    mesh = build_mesh(cfg.n, 2)
    ref_dir = Path(cfg.out_dir) / "reference"
    if not (ref_dir / storage.MANIFEST_NAME).exists():
        raise ConfigError(f"reference not found in {ref_dir}; run 'reference' first")
    ref = mc.load_reference(ref_dir, expect_n=cfg.n)
    ref_manifest = storage.read_manifest(ref_dir)
    expected = base_manifest(cfg, realisation=mc.REFERENCE_REALISATION,
                             sample_ids=[], failed_ids=[])
    stale = [key for key in ("experiment", "n", "dt_factor", "epsilon", "gamma",
                             "a", "mu", "lambda", "T", "seed")
             if ref_manifest.get(key) != expected[key]]
    if stale:
        raise ConfigError(
            f"reference in {ref_dir} was built with a different config "
            f"(mismatching keys: {', '.join(stale)}); rebuild it")
    model = model_for(cfg)
    n_max = max(cfg.N)

    # per (field, N): accumulated per-realisation error norms
    norms: dict[tuple[str, int], tuple[list[float], list[float]]] = {
        (f, n): ([], []) for f in mc.FIELD_NAMES for n in cfg.N
    }
    t0 = time.perf_counter()
    for m in range(cfg.M):
        ens = mc.run_ensemble(model, mesh, scheme_config(cfg), a=cfg.a,
                              gamma=cfg.gamma, N=n_max, realisation=m,
                              mu=cfg.mu, lam=cfg.lam, threads=threads)
        for n in cfg.N:
            stats = mc.ensemble_statistics(ens.prefix(n).states)
            for field in mc.FIELD_NAMES:
                p = mc.metric_exponent(field, cfg.gamma)
                mean_norm, spread_norm = mc.realisation_error_norms(
                    stats, ref, field, p, mesh)
                norms[(field, n)][0].append(mean_norm)
                norms[(field, n)][1].append(spread_norm)
        print(f"  realisation {m + 1}/{cfg.M} done "
              f"({time.perf_counter() - t0:.1f}s elapsed)", flush=True)

    rows = []
    for field in mc.FIELD_NAMES:
        p = mc.metric_exponent(field, cfg.gamma)
        for n in cfg.N:
            metrics = mc.aggregate_metrics(*norms[(field, n)], p)
            for metric in mc.METRIC_NAMES:
                rows.append(f"{cfg.experiment},{field},{metric},{p!r},{n},"
                            f"{cfg.M},{cfg.S},{metrics[metric]!r}")
    out = Path(cfg.out_dir) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    storage.write_csv_atomic(out, "experiment,field,metric,p,N,M,S,value", rows)
    print(f"metrics: {len(rows)} rows -> {out}")
    return EXIT_OK


def read_metrics_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigError(f"metrics CSV not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "experiment,field,metric,p,N,M,S,value":
        raise ConfigError(f"{path}: unexpected CSV header")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise ConfigError(f"{path}: row {i}: expected 8 columns, got {len(parts)}")
        rows.append({
            "experiment": parts[0], "field": parts[1], "metric": parts[2],
            "p": float(parts[3]), "N": int(parts[4]), "M": int(parts[5]),
            "S": int(parts[6]), "value": float(parts[7]),
        })
    return rows


def cmd_convergence(cfg: RunConfig) -> int:
    rows = read_metrics_csv(Path(cfg.out_dir) / "metrics.csv")
    out_rows = []
    print(f"{'field':>6} {'metric':>6} {'slope':>8} {'residual':>9}")
    for field in mc.FIELD_NAMES:
        for metric in mc.METRIC_NAMES:
            pts = sorted(
                (r["N"], r["value"]) for r in rows
                if r["field"] == field and r["metric"] == metric
            )
            if len(pts) < 3:
                continue
            sizes = [p[0] for p in pts]
            errors = [p[1] for p in pts]
            if any(e <= 0.0 for e in errors):
                raise PropertyFailure(
                    f"{field}/{metric}: nonpositive error value, cannot fit a rate")
            fit = mc.slope_fit(sizes, errors)
            out_rows.append(f"{field},{metric},{fit.slope!r},{fit.residual!r}")
            print(f"{field:>6} {metric:>6} {fit.slope:8.3f} {fit.residual:9.3f}")
    out = Path(cfg.out_dir) / "rates.csv"
    storage.write_csv_atomic(out, "field,metric,slope,residual", out_rows)
    print(f"rates -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify: runtime property suite


def verify_properties(cfg: RunConfig, threads: int = 1) -> list[tuple[str, bool, str]]:
    """Run the structure/oracle property suite at small scale.

    A check that raises counts as failed; the remaining checks still run.
    """
    rng = np.random.default_rng(cfg.seed)
    params = FluidParams(mu=cfg.mu, lam=cfg.lam, gamma=cfg.gamma, a=cfg.a)

    def check_flux_consistency():
        f = upwind_flux(1.3, 1.3, np.array([0.7, -0.2]), np.array([0.7, -0.2]),
                        np.array([1.0, 0.0]), h=0.5, epsilon=cfg.epsilon)
        expected = 1.3 * 0.7
        return f == expected, f"F={f!r} expected {expected!r}"

    def check_jump_average():
        mesh4 = build_mesh(4, 2)
        vals = rng.standard_normal(mesh4.shape)
        field4 = Field(mesh4, vals)
        flat = vals.ravel()
        for face in mesh4.faces():
            if avg(field4, face) != 0.5 * (flat[face.in_cell] + flat[face.out_cell]):
                return False, f"average wrong on face {face}"
            if jump(field4, face) != flat[face.out_cell] - flat[face.in_cell]:
                return False, f"jump wrong on face {face}"
        return True, f"{mesh4.face_count} faces checked"

    def check_telescoping():
        mesh4 = build_mesh(4, 2)
        rho = 1.0 + 0.2 * rng.random(mesh4.shape)
        mom = 0.3 * rng.standard_normal(mesh4.shape + (2,))
        rho_old = 1.0 + 0.2 * rng.random(mesh4.shape)
        mom_old = 0.3 * rng.standard_normal(mesh4.shape + (2,))
        s_new = State(Field(mesh4, rho), Field(mesh4, mom))
        s_old = State(Field(mesh4, rho_old), Field(mesh4, mom_old))
        dt = mesh4.h
        res = residual(s_new, s_old, dt, params, cfg.epsilon)
        mass_change = mesh4.cell_volume * (rho - rho_old).sum() / dt
        tel = abs(res[..., 0].sum() - mass_change)
        mom_tel = np.abs(res[..., 1:].sum(axis=(0, 1))
                         - mesh4.cell_volume * (mom - mom_old).sum(axis=(0, 1)) / dt).max()
        return tel <= 1e-12 and mom_tel <= 1e-12, f"mass {tel:.2e}, momentum {mom_tel:.2e}"

    def check_gram():
        mesh2 = build_mesh(2, 2)
        fa = [Field(mesh2, rng.standard_normal(mesh2.shape)) for _ in range(3)]
        fb = [Field(mesh2, rng.standard_normal(mesh2.shape)) for _ in range(3)]
        worst = 0.0
        for k in (1, 2, 3):
            fast = mc.tensor_moment_error_l2(fa, fb, k)
            dense = mc.tensor_moment_error_l2_dense(fa, fb, k)
            worst = max(worst, abs(fast - dense) / max(dense, 1e-30))
        return worst <= 1e-10, f"max rel diff {worst:.2e}"

    # one short seeded run feeds the four structure checks; a failing
    # solve is cached too so a broken build fails each check only once
    run_state = {}

    def short_run():
        if "result" not in run_state:
            try:
                mesh16 = build_mesh(16, 2)
                model = ExperimentModel("vortex", seed=cfg.seed, half_width=cfg.half_width)
                sample = draw_sample(model, 0, mu=cfg.mu, lam=cfg.lam)
                run_cfg = SchemeConfig(T=4 * mesh16.h * cfg.dt_factor, epsilon=cfg.epsilon,
                                       dt_factor=cfg.dt_factor)
                run_state["result"] = (mesh16, solve_trajectory(
                    sample, mesh16, run_cfg, a=cfg.a, gamma=cfg.gamma))
            except Exception as exc:
                run_state["result"] = exc
        if isinstance(run_state["result"], Exception):
            raise run_state["result"]
        return run_state["result"]

    def check_mass():
        mesh, traj = short_run()
        mass = [mesh.cell_volume * s.rho.values.sum() for s in traj.states]
        drift = max(abs(m - mass[0]) for m in mass) / mass[0]
        return drift <= 1e-10, f"drift {drift:.2e}"

    def check_momentum():
        mesh, traj = short_run()
        mom = [mesh.cell_volume * s.mom.values.sum(axis=(0, 1)) for s in traj.states]
        scale = max(np.abs(mom[0]).max(), mesh.cell_volume)
        drift = max(np.abs(m - mom[0]).max() for m in mom) / scale
        return drift <= 1e-10, f"drift {drift:.2e}"

    def check_positivity():
        _, traj = short_run()
        min_rho = min(d.min_density for d in traj.diagnostics)
        return min_rho > 0.0, f"min density {min_rho:.6f}"

    def check_ledger():
        _, traj = short_run()
        report = energy_ledger_check(traj, params)
        return report.ok, f"worst slack {report.worst_slack:+.3e}"

    suite = [
        ("flux_consistency_constants", check_flux_consistency),
        ("jump_average_enumeration", check_jump_average),
        ("residual_telescoping", check_telescoping),
        ("gram_vs_dense_tensor", check_gram),
        ("mass_conservation", check_mass),
        ("momentum_conservation", check_momentum),
        ("positivity", check_positivity),
        ("energy_ledger", check_ledger),
    ]
    checks = []
    for name, fn in suite:
        try:
            ok, detail = fn()
        except Exception as exc:  # a broken build must fail loudly, not abort
            ok, detail = False, f"error: {exc}"
        checks.append((name, ok, detail))
    return checks


def cmd_verify(cfg: RunConfig, threads: int) -> int:
    checks = verify_properties(cfg, threads)
    failed = [name for name, ok, _ in checks if not ok]
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name:28s} {detail}")
    if failed:
        raise PropertyFailure(f"{len(failed)} properties failed: {', '.join(failed)}")
    print(f"all {len(checks)} properties pass")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcnsfv",
        description="Monte Carlo finite-volume solver for random barotropic flow",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker count (default: MCNSFV_THREADS or all cores)")

    p = sub.add_parser("run-sample", help="solve one sample and write its terminal state")
    common(p)
    p.add_argument("--sample", type=int, default=0, help="sample index")

    common(sub.add_parser("reference", help="build the S-sample reference statistics"))

    p = sub.add_parser("mc", help="run and persist one ensemble")
    common(p)
    p.add_argument("--realisation", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=None,
                   help="ensemble size (default: max of the config's N list)")

    common(sub.add_parser("estimate", help="run all ensembles and emit the metrics CSV"))
    common(sub.add_parser("convergence", help="fit statistical rates from the metrics CSV"))
    common(sub.add_parser("verify", help="run the structure/oracle property suite"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out_dir=args.out)
        threads = resolve_threads(cfg, args.threads)

        if args.command == "run-sample":
            return cmd_run_sample(cfg, args.sample, threads)
        if args.command == "reference":
            return cmd_reference(cfg, threads)
        if args.command == "mc":
            return cmd_mc(cfg, args.realisation, args.num_samples, threads)
        if args.command == "estimate":
            return cmd_estimate(cfg, threads)
        if args.command == "convergence":
            return cmd_convergence(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, threads)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, SchemeError, storage.StorageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepFailure, mc.EnsembleError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PropertyFailure as exc:
        print(f"property failure: {exc}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
