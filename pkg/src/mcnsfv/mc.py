"""Monte Carlo orchestration and statistical estimators.

Ensembles solve N independent samples (embarrassingly parallel); all
reductions run afterwards in a fixed pairwise tree over the sample
index, so results are bitwise identical for any worker count.

Estimators (cellwise, vector magnitudes Euclidean):

    mean      (1/N) sum U^n
    deviation (1/N) sum |U^n - mean|
    variance  (1/(N-1)) sum |U^n - mean|^2

The four error metrics compare ensemble estimators at the final time
against a large-S reference on the same mesh: E1/E3 average the L^p
norm over M realisations, E2/E4 take the (1/p)-power of the averaged
p-th power.  The exponent p is gamma for the density, 2 gamma/(gamma+1)
for the momentum and 2 for the velocity.
"""

from __future__ import annotations

import math
import multiprocessing
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import Field, State, lp_norm, total_energy
from .mesh import TorusMesh, build_mesh
from .random_data import ExperimentModel, draw_sample
from .scheme import SchemeConfig, StepFailure, solve_trajectory
from . import storage

REFERENCE_REALISATION = 2**32  # substream tag reserved for the reference ensemble
FIELD_NAMES = ("rho", "m", "u")
METRIC_NAMES = ("E1", "E2", "E3", "E4")


class EnsembleError(RuntimeError):
    """No usable samples, or inconsistent ensemble inputs."""


@dataclass
class SampleResult:
    sample_id: int
    failed: bool
    state: State | None
    min_density: float
    worst_slack: float
    newton_iters: int
    n_steps: int
    message: str = ""


@dataclass
class Ensemble:
    manifest: dict
    results: list[SampleResult]

    @property
    def sample_ids(self) -> list[int]:
        return [r.sample_id for r in self.results]

    @property
    def failed_ids(self) -> list[int]:
        return [r.sample_id for r in self.results if r.failed]

    @property
    def states(self) -> list[State]:
        return [r.state for r in self.results if not r.failed]

    def prefix(self, n: int) -> "Ensemble":
        """Sub-ensemble of the first n sample indices (shared substreams)."""
        manifest = dict(self.manifest,
                        sample_ids=list(range(n)),
                        failed_ids=[i for i in self.failed_ids if i < n])
        return Ensemble(manifest=manifest, results=self.results[:n])


@dataclass(frozen=True)
class ReferenceStats:
    """Mean/deviation/variance fields estimated from S samples."""

    n: int
    sample_count: int
    mean_rho: Field
    mean_mom: Field
    mean_u: Field
    dev_rho: Field
    dev_mom: Field
    var_u: Field


# ---------------------------------------------------------------------------
# deterministic reductions


def pairwise_sum(arrays: list[np.ndarray]) -> np.ndarray:
    """Sum a list of arrays by recursive halving (fixed association order)."""
    if not arrays:
        raise EnsembleError("nothing to reduce")

    def rec(lo: int, hi: int) -> np.ndarray:
        if hi - lo == 1:
            return arrays[lo]
        mid = (lo + hi) // 2
        return rec(lo, mid) + rec(mid, hi)

    return rec(0, len(arrays))


def mean_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    return pairwise_sum(arrays) / len(arrays)


def deviation_arrays(arrays: list[np.ndarray], mean: np.ndarray,
                     vector: bool | None = None) -> np.ndarray:
    """Cellwise (1/N) sum |U^n - mean|, Euclidean over the component axis.

    ``vector`` marks the last axis as components; by default 2-D grids
    are scalars and 3-D ones are vector fields.
    """
    if vector is None:
        vector = arrays[0].ndim == 3
    if vector:
        devs = [np.sqrt(np.sum((a - mean) ** 2, axis=-1)) for a in arrays]
    else:
        devs = [np.abs(a - mean) for a in arrays]
    return pairwise_sum(devs) / len(arrays)


def variance_arrays(arrays: list[np.ndarray], mean: np.ndarray,
                    vector: bool | None = None) -> np.ndarray:
    """Cellwise unbiased variance (1/(N-1)) sum |U^n - mean|^2."""
    if len(arrays) < 2:
        raise EnsembleError("variance estimator needs at least 2 samples")
    if vector is None:
        vector = arrays[0].ndim == 3
    if vector:
        sq = [np.sum((a - mean) ** 2, axis=-1) for a in arrays]
    else:
        sq = [(a - mean) ** 2 for a in arrays]
    return pairwise_sum(sq) / (len(arrays) - 1)


@dataclass(frozen=True)
class EnsembleStats:
    mean_rho: np.ndarray
    mean_mom: np.ndarray
    mean_u: np.ndarray
    dev_rho: np.ndarray
    dev_mom: np.ndarray
    var_u: np.ndarray


def ensemble_statistics(states: list[State]) -> EnsembleStats:
    if not states:
        raise EnsembleError("no successful samples to reduce")
    rhos = [s.rho.values for s in states]
    moms = [s.mom.values for s in states]
    us = [s.velocity().values for s in states]
    mean_rho = mean_arrays(rhos)
    mean_mom = mean_arrays(moms)
    mean_u = mean_arrays(us)
    return EnsembleStats(
        mean_rho=mean_rho,
        mean_mom=mean_mom,
        mean_u=mean_u,
        dev_rho=deviation_arrays(rhos, mean_rho, vector=False),
        dev_mom=deviation_arrays(moms, mean_mom, vector=True),
        var_u=(variance_arrays(us, mean_u, vector=True)
               if len(states) >= 2 else np.zeros_like(mean_rho)),
    )


def mean_field(ens: Ensemble, mesh: TorusMesh) -> State:
    """Cellwise mean density and momentum of an ensemble, as a state."""
    stats = ensemble_statistics(ens.states)
    return State(Field(mesh, stats.mean_rho), Field(mesh, stats.mean_mom))


def deviation_field(ens: Ensemble, mesh: TorusMesh, which: str = "rho") -> Field:
    stats = ensemble_statistics(ens.states)
    return Field(mesh, stats.dev_rho if which == "rho" else stats.dev_mom)


def variance_field(ens: Ensemble, mesh: TorusMesh) -> Field:
    stats = ensemble_statistics(ens.states)
    return Field(mesh, stats.var_u)


def reference_stats(ens: Ensemble, mesh: TorusMesh) -> ReferenceStats:
    stats = ensemble_statistics(ens.states)
    return ReferenceStats(
        n=mesh.n,
        sample_count=len(ens.states),
        mean_rho=Field(mesh, stats.mean_rho),
        mean_mom=Field(mesh, stats.mean_mom),
        mean_u=Field(mesh, stats.mean_u),
        dev_rho=Field(mesh, stats.dev_rho),
        dev_mom=Field(mesh, stats.dev_mom),
        var_u=Field(mesh, stats.var_u),
    )


# ---------------------------------------------------------------------------
# ensemble solves


def _solve_task(task) -> SampleResult:
    (model, index, realisation, mesh, cfg, a, gamma, mu, lam) = task
    sample = draw_sample(model, index, realisation, mu=mu, lam=lam)
    try:
        traj = solve_trajectory(sample, mesh, cfg, a=a, gamma=gamma)
    except StepFailure as exc:
        return SampleResult(sample_id=index, failed=True, state=None,
                            min_density=float("nan"), worst_slack=float("nan"),
                            newton_iters=0, n_steps=0, message=str(exc))
    diags = traj.diagnostics
    energies = [total_energy(traj.states[0], a, gamma)] + [d.energy for d in diags]
    slacks = [energies[k] - d.energy - d.dt * d.dissipation
              for k, d in enumerate(diags)]
    return SampleResult(
        sample_id=index,
        failed=False,
        state=traj.terminal,
        min_density=min(d.min_density for d in diags),
        worst_slack=min(slacks) if slacks else 0.0,
        newton_iters=sum(d.newton_iters for d in diags),
        n_steps=traj.n_steps,
    )


def default_threads() -> int:
    env = os.environ.get("MCNSFV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items: list, threads: int) -> list:
    """Order-preserving map; identical results for any worker count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, len(items) // (4 * threads))
    with ctx.Pool(processes=min(threads, len(items))) as pool:
        return pool.map(fn, items, chunksize=chunk)


def run_ensemble(model: ExperimentModel, mesh: TorusMesh, cfg: SchemeConfig,
                 a: float, gamma: float, N: int, realisation: int = 0,
                 mu: float = 0.1, lam: float = 0.0, threads: int = 1,
                 seed: int | None = None) -> Ensemble:
    """Solve N i.i.d. samples of one realisation; failures are recorded."""
    if N < 1:
        raise EnsembleError(f"ensemble size must be >= 1, got {N}")
    tasks = [(model, i, realisation, mesh, cfg, a, gamma, mu, lam) for i in range(N)]
    results = parallel_map(_solve_task, tasks, threads)
    if all(r.failed for r in results):
        raise EnsembleError(f"all {N} samples failed; first: {results[0].message}")
    manifest = {
        "format_version": storage.FORMAT_VERSION,
        "experiment": model.experiment,
        "n": mesh.n,
        "dt_factor": cfg.dt_factor,
        "epsilon": cfg.epsilon,
        "gamma": gamma,
        "a": a,
        "mu": mu,
        "lambda": lam,
        "T": cfg.T,
        "seed": model.seed if seed is None else seed,
        "realisation": realisation,
        "sample_ids": [r.sample_id for r in results],
        "failed_ids": [r.sample_id for r in results if r.failed],
        "payload_checksums": {},
    }
    return Ensemble(manifest=manifest, results=results)


# ---------------------------------------------------------------------------
# error metrics


def metric_exponent(field: str, gamma: float) -> float:
    """L^p exponent used for each unknown."""
    if field == "rho":
        return gamma
    if field == "m":
        return 2.0 * gamma / (gamma + 1.0)
    if field == "u":
        return 2.0
    raise ValueError(f"unknown field {field!r}")


def realisation_error_norms(stats: EnsembleStats, ref: ReferenceStats,
                            field: str, p: float, mesh: TorusMesh) -> tuple[float, float]:
    """(mean-estimator error norm, spread-estimator error norm) for one realisation.

    The spread estimator is the deviation for rho and m and the unbiased
    variance for u.
    """
    if field == "rho":
        mean_err = Field(mesh, stats.mean_rho - ref.mean_rho.values)
        spread_err = Field(mesh, stats.dev_rho - ref.dev_rho.values)
    elif field == "m":
        mean_err = Field(mesh, stats.mean_mom - ref.mean_mom.values)
        spread_err = Field(mesh, stats.dev_mom - ref.dev_mom.values)
    elif field == "u":
        mean_err = Field(mesh, stats.mean_u - ref.mean_u.values)
        spread_err = Field(mesh, stats.var_u - ref.var_u.values)
    else:
        raise ValueError(f"unknown field {field!r}")
    return lp_norm(mean_err, p), lp_norm(spread_err, p)


def aggregate_metrics(mean_norms: list[float], spread_norms: list[float],
                      p: float) -> dict[str, float]:
    """E1..E4 from per-realisation error norms."""
    m = len(mean_norms)
    if m < 1:
        raise EnsembleError("need at least one realisation")
    e1 = math.fsum(mean_norms) / m
    e2 = (math.fsum(x**p for x in mean_norms) / m) ** (1.0 / p)
    e3 = math.fsum(spread_norms) / m
    e4 = (math.fsum(x**p for x in spread_norms) / m) ** (1.0 / p)
    return {"E1": e1, "E2": e2, "E3": e3, "E4": e4}


# ---------------------------------------------------------------------------
# k-th moment errors (Hilbert cross-norm trick)


def _gram(fields_a: list[Field], fields_b: list[Field]) -> np.ndarray:
    vol = fields_a[0].mesh.cell_volume
    fa = np.stack([f.flat().reshape(-1) for f in fields_a])
    fb = np.stack([f.flat().reshape(-1) for f in fields_b])
    return vol * (fa @ fb.T)


def tensor_moment_error_l2(fields_a: list[Field], fields_b: list[Field], k: int) -> float:
    """L^2(T^{kd}) distance of the empirical k-th tensor moments.

    Uses <f^(k), g^(k)> = <f, g>^k, so no tensor is ever formed; both
    sample lists must live on one mesh.
    """
    if k < 1:
        raise ValueError(f"moment order must be >= 1, got {k}")
    if not fields_a or not fields_b:
        raise EnsembleError("empty sample list")
    mesh = fields_a[0].mesh
    if any(f.mesh != mesh for f in fields_a + fields_b):
        raise EnsembleError("samples live on different meshes")
    n_a, n_b = len(fields_a), len(fields_b)
    gaa = _gram(fields_a, fields_a) ** k
    gbb = _gram(fields_b, fields_b) ** k
    gab = _gram(fields_a, fields_b) ** k
    value = gaa.sum() / n_a**2 - 2.0 * gab.sum() / (n_a * n_b) + gbb.sum() / n_b**2
    return math.sqrt(max(value, 0.0))


def tensor_moment_error_l2_dense(fields_a: list[Field], fields_b: list[Field],
                                 k: int, max_entries: int = 10**6) -> float:
    """Brute-force reference: forms the k-fold tensors explicitly.

    Only meant for tiny meshes; kept as the independent cross-check of
    the Gram identity.
    """
    mesh = fields_a[0].mesh
    flat_a = [f.flat().reshape(-1) for f in fields_a]
    flat_b = [f.flat().reshape(-1) for f in fields_b]
    size = flat_a[0].size**k
    if size > max_entries:
        raise EnsembleError(f"dense tensor with {size} entries is too large")

    def tensor_power(v: np.ndarray) -> np.ndarray:
        out = v
        for _ in range(k - 1):
            out = np.multiply.outer(out, v)
        return out

    mom_a = sum(tensor_power(v) for v in flat_a) / len(flat_a)
    mom_b = sum(tensor_power(v) for v in flat_b) / len(flat_b)
    diff = mom_a - mom_b
    return math.sqrt(mesh.cell_volume**k * float(np.sum(diff**2)))


# ---------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    residual: float  # RMS of log-space fit residuals


def slope_fit(sizes: list[float], errors: list[float]) -> SlopeFit:
    """Least-squares slope of log(error) against log(size)."""
    if len(sizes) < 3:
        raise ValueError(f"need at least 3 points, got {len(sizes)}")
    if len(sizes) != len(errors):
        raise ValueError("sizes and errors differ in length")
    if any(e <= 0.0 for e in errors):
        raise ValueError("errors must be strictly positive for a log-log fit")
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return SlopeFit(slope=float(slope), intercept=float(intercept),
                    residual=float(np.sqrt(np.mean(resid**2))))


# ---------------------------------------------------------------------------
# persistence


def save_ensemble(directory: str | Path, ens: Ensemble, mesh: TorusMesh) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for r in ens.results:
        if r.failed:
            continue
        name = f"sample_{r.sample_id:05d}.fvf1"
        values = np.concatenate(
            [r.state.rho.flat()[:, None], r.state.mom.flat()], axis=1
        )
        storage.write_payload(directory / name, values, mesh.d, mesh.n)
        checksums[name] = storage.sha256_file(directory / name)
    manifest = dict(ens.manifest)
    manifest["payload_checksums"] = checksums
    storage.write_manifest(directory, manifest)


def load_ensemble(directory: str | Path, expect_n: int | None = None) -> Ensemble:
    directory = Path(directory)
    manifest = storage.read_manifest(directory)
    if expect_n is not None and manifest["n"] != expect_n:
        raise storage.MeshMismatch(
            f"ensemble has n={manifest['n']}, requested n={expect_n}"
        )
    mesh = build_mesh(manifest["n"], 2)
    failed = set(manifest["failed_ids"])
    results = []
    for sid in manifest["sample_ids"]:
        if sid in failed:
            results.append(SampleResult(sample_id=sid, failed=True, state=None,
                                        min_density=float("nan"),
                                        worst_slack=float("nan"),
                                        newton_iters=0, n_steps=0))
            continue
        name = f"sample_{sid:05d}.fvf1"
        path = storage.verify_payload(directory, name, manifest)
        try:
            values, d, n = storage.read_payload(path)
        except storage.StorageError as exc:
            raise storage.StorageError(f"sample {sid}: {exc}") from exc
        if n != manifest["n"]:
            raise storage.MeshMismatch(f"sample {sid}: payload n={n} vs manifest n={manifest['n']}")
        state = State(
            Field(mesh, values[:, 0].reshape(mesh.shape)),
            Field(mesh, values[:, 1:].reshape(mesh.shape + (mesh.d,))),
        )
        results.append(SampleResult(sample_id=sid, failed=False, state=state,
                                    min_density=float(values[:, 0].min()),
                                    worst_slack=float("nan"),
                                    newton_iters=0, n_steps=0))
    return Ensemble(manifest=manifest, results=results)


_REFERENCE_PAYLOADS = {
    "mean_rho": ("mean_rho.fvf1", 1),
    "mean_mom": ("mean_mom.fvf1", None),
    "mean_u": ("mean_u.fvf1", None),
    "dev_rho": ("dev_rho.fvf1", 1),
    "dev_mom": ("dev_mom.fvf1", 1),
    "var_u": ("var_u.fvf1", 1),
}


def save_reference(directory: str | Path, ref: ReferenceStats, manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh = ref.mean_rho.mesh
    checksums = {}
    for attr, (name, _) in _REFERENCE_PAYLOADS.items():
        field: Field = getattr(ref, attr)
        values = field.flat()
        storage.write_payload(directory / name, values, mesh.d, mesh.n)
        checksums[name] = storage.sha256_file(directory / name)
    manifest = dict(manifest)
    manifest["payload_checksums"] = checksums
    storage.write_manifest(directory, manifest)


def load_reference(directory: str | Path, expect_n: int | None = None) -> ReferenceStats:
    directory = Path(directory)
    manifest = storage.read_manifest(directory)
    if expect_n is not None and manifest["n"] != expect_n:
        raise storage.MeshMismatch(
            f"reference has n={manifest['n']}, requested n={expect_n}"
        )
    mesh = build_mesh(manifest["n"], 2)
    fields = {}
    for attr, (name, comps) in _REFERENCE_PAYLOADS.items():
        path = storage.verify_payload(directory, name, manifest)
        values, d, n = storage.read_payload(path)
        if n != mesh.n:
            raise storage.MeshMismatch(f"{name}: payload n={n} vs manifest n={mesh.n}")
        if values.shape[1] == 1:
            fields[attr] = Field(mesh, values[:, 0].reshape(mesh.shape))
        else:
            fields[attr] = Field(mesh, values.reshape(mesh.shape + (mesh.d,)))
    return ReferenceStats(n=mesh.n, sample_count=len(manifest["sample_ids"]), **fields)
