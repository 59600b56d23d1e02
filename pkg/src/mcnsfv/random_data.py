"""Random initial data for the three torus experiments.

Every sample is drawn from its own counter-based substream keyed by
(base seed, sample index, realisation index), so draws are identical
regardless of execution order or worker assignment, and distinct indices
give statistically independent streams.

Experiments (uniform perturbations Y ~ U(-w, w), default w = 0.1):

  steady_state      rho0 = 1 + Y1 cos(2 pi (x1+x2)),  u0 = (Y2, Y3)
  vortex            same rho0; u0 adds a swirl of radius 0.5 around 0
  vortex_interface  rho0 = 1; swirl whose radius I = 0.5 + Y is random

The swirl with radius R is tangential with speed 1 - cos(2 pi |x| / R)
inside |x| < R and vanishes outside (for R = 0.5 the phase is 4 pi |x|).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EXPERIMENT_IDS = ("steady_state", "vortex", "vortex_interface")
DEFAULT_HALF_WIDTH = 0.1
DEFAULT_MU = 0.1
DEFAULT_LAMBDA = 0.0
_STREAM_TAG = 0x4D434E53  # distinguishes this stream family in the counter


class ExperimentError(ValueError):
    """Unknown experiment id or invalid perturbation width."""


@dataclass(frozen=True)
class ExperimentModel:
    """One experiment plus its perturbation law and base seed."""

    experiment: str
    seed: int
    half_width: float = DEFAULT_HALF_WIDTH

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_IDS:
            raise ExperimentError(
                f"unknown experiment {self.experiment!r}; choose from {EXPERIMENT_IDS}"
            )
        if self.half_width < 0.0:
            raise ExperimentError(f"half-width must be >= 0, got {self.half_width}")


def rng_stream(seed: int, sample_index: int, realisation: int = 0) -> np.random.Generator:
    """Independent uniform stream for one (seed, sample, realisation) key."""
    bits = np.random.Philox(
        key=np.uint64(seed),
        counter=[0, np.uint64(realisation), np.uint64(sample_index), np.uint64(_STREAM_TAG)],
    )
    return np.random.Generator(bits)


@dataclass(frozen=True)
class TrigDensity:
    """1 + amplitude * cos(2 pi (x1 + x2))."""

    amplitude: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return 1.0 + self.amplitude * np.cos(2.0 * np.pi * (pts[:, 0] + pts[:, 1]))


@dataclass(frozen=True)
class SwirlVelocity:
    """Constant base velocity plus an optional planar swirl around the origin."""

    base: tuple[float, ...]
    radius: float | None = None

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        u = np.tile(np.asarray(self.base, dtype=float), (len(pts), 1))
        if self.radius is not None:
            r = np.hypot(pts[:, 0], pts[:, 1])
            inside = r < self.radius
            safe_r = np.where(r > 0.0, r, 1.0)
            speed = np.where(
                inside & (r > 0.0),
                (1.0 - np.cos(2.0 * np.pi * r / self.radius)) / safe_r,
                0.0,
            )
            u[:, 0] += speed * pts[:, 1]
            u[:, 1] -= speed * pts[:, 0]
        return u


@dataclass(frozen=True)
class MomentumProduct:
    """Pointwise product rho0(x) * u0(x)."""

    rho0: TrigDensity
    u0: SwirlVelocity

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.rho0(points)[:, None] * self.u0(points)


@dataclass(frozen=True)
class DataSample:
    """One element of the data space: initial fields plus coefficients."""

    experiment: str
    sample_id: int
    realisation: int
    draws: tuple[float, ...]
    rho0: TrigDensity
    u0: SwirlVelocity
    m0: MomentumProduct
    mu: float
    lam: float
    g: object | None = None


def draw_sample(model: ExperimentModel, index: int, realisation: int = 0,
                mu: float = DEFAULT_MU, lam: float = DEFAULT_LAMBDA) -> DataSample:
    """Draw the sample with the given index from its dedicated substream."""
    if index < 0:
        raise ExperimentError(f"sample index must be >= 0, got {index}")
    rng = rng_stream(model.seed, index, realisation)
    w = model.half_width
    if model.experiment == "steady_state":
        y = rng.uniform(-w, w, size=3)
        rho0 = TrigDensity(y[0])
        u0 = SwirlVelocity((y[1], y[2]), radius=None)
    elif model.experiment == "vortex":
        y = rng.uniform(-w, w, size=3)
        rho0 = TrigDensity(y[0])
        u0 = SwirlVelocity((y[1], y[2]), radius=0.5)
    else:  # vortex_interface: a single draw perturbs the swirl radius
        y = rng.uniform(-w, w, size=1)
        rho0 = TrigDensity(0.0)
        u0 = SwirlVelocity((0.0, 0.0), radius=0.5 + y[0])
    return DataSample(
        experiment=model.experiment,
        sample_id=int(index),
        realisation=int(realisation),
        draws=tuple(float(v) for v in y),
        rho0=rho0,
        u0=u0,
        m0=MomentumProduct(rho0, u0),
        mu=mu,
        lam=lam,
    )
