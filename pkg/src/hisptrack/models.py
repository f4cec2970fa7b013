"""Motion, range-bearing sensor, birth and clutter models on a polar cell grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .gaussian import GaussianComponent, GaussianMixture, wrap_angle
from .hypotheses import ExtendedLaw

__all__ = [
    "MotionModel",
    "constant_velocity_model",
    "SensorGrid",
    "ObservationModel",
    "BirthModel",
    "ClutterModel",
    "ModelSet",
    "Scan",
    "make_scan",
    "range_bearing",
    "range_bearing_jacobian",
    "polar_cell_moments",
]


@dataclass(frozen=True, eq=False)
class MotionModel:
    """Constant-velocity motion on state [x, y, vx, vy] with survival probability.

    `noise_gain` maps a 2-dim acceleration draw into state space, so the
    (singular) process noise is noise_gain @ (accel_var I) @ noise_gain.T.
    """

    dt: float
    transition: np.ndarray
    process_noise: np.ndarray
    noise_gain: np.ndarray
    accel_var: float
    p_survive: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_survive <= 1.0:
            raise ValueError(f"p_survive must be in [0, 1], got {self.p_survive}")


def constant_velocity_model(dt: float, accel_var: float, p_survive: float = 1.0) -> MotionModel:
    """Discrete white-noise-acceleration model; accel_var in m^2 s^-4."""
    F = np.eye(4)
    F[0, 2] = dt
    F[1, 3] = dt
    g = np.array([
        [0.5 * dt * dt, 0.0],
        [0.0, 0.5 * dt * dt],
        [dt, 0.0],
        [0.0, dt],
    ])
    Q = accel_var * (g @ g.T)
    return MotionModel(dt=dt, transition=F, process_noise=Q, noise_gain=g,
                       accel_var=accel_var, p_survive=p_survive)


def range_bearing(state: np.ndarray) -> np.ndarray:
    """Map a state to (range, bearing); the sensor sits at the origin."""
    x, y = float(state[0]), float(state[1])
    r = math.hypot(x, y)
    if r == 0.0:
        raise ValueError("state at the sensor origin has undefined bearing")
    return np.array([r, math.atan2(y, x)])


def range_bearing_jacobian(state: np.ndarray) -> np.ndarray:
    x, y = float(state[0]), float(state[1])
    r2 = x * x + y * y
    if r2 == 0.0:
        raise ValueError("state at the sensor origin has undefined bearing")
    r = math.sqrt(r2)
    return np.array([
        [x / r, y / r, 0.0, 0.0],
        [-y / r2, x / r2, 0.0, 0.0],
    ])


@dataclass(frozen=True, eq=False)
class SensorGrid:
    """Polar resolution-cell grid covering range [r_min, r_max], bearing (-pi, pi].

    Cell sizes must tile the surveillance region exactly. Flat cell ids run
    range-major: id = range_index * n_bearing + bearing_index.
    """

    r_min: float
    r_max: float
    cell_dr: float
    cell_dtheta: float
    n_range: int = field(init=False)
    n_bearing: int = field(init=False)

    def __post_init__(self):
        if self.r_min <= 0 or self.r_max <= self.r_min:
            raise ValueError("need 0 < r_min < r_max")
        n_range = (self.r_max - self.r_min) / self.cell_dr
        n_bearing = 2.0 * math.pi / self.cell_dtheta
        if abs(n_range - round(n_range)) > 1e-9 or abs(n_bearing - round(n_bearing)) > 1e-9:
            raise ValueError("cell sizes must divide the range span and 2*pi exactly")
        object.__setattr__(self, "n_range", int(round(n_range)))
        object.__setattr__(self, "n_bearing", int(round(n_bearing)))

    @property
    def n_cells(self) -> int:
        return self.n_range * self.n_bearing

    def contains(self, z: np.ndarray) -> bool:
        r, theta = float(z[0]), float(z[1])
        return self.r_min <= r <= self.r_max and -math.pi < theta <= math.pi + 1e-12

    def cell_of(self, z: np.ndarray) -> int:
        """Flat cell id of an observation; out-of-bounds observations raise."""
        r, theta = float(z[0]), float(wrap_angle(z[1]))
        if not (self.r_min <= r <= self.r_max):
            raise ValueError(f"range {r} outside [{self.r_min}, {self.r_max}]")
        ir = min(int((r - self.r_min) / self.cell_dr), self.n_range - 1)
        # Bearing cells are half-open on the left: (lo, hi].
        it = min(max(int(math.ceil((theta + math.pi) / self.cell_dtheta)) - 1, 0),
                 self.n_bearing - 1)
        return ir * self.n_bearing + it

    def cell_bounds(self, cell: int) -> Tuple[float, float, float, float]:
        """(r_lo, r_hi, theta_lo, theta_hi) of a cell."""
        ir, it = divmod(cell, self.n_bearing)
        if not 0 <= ir < self.n_range:
            raise ValueError(f"cell id {cell} out of range")
        r_lo = self.r_min + ir * self.cell_dr
        th_lo = -math.pi + it * self.cell_dtheta
        return r_lo, r_lo + self.cell_dr, th_lo, th_lo + self.cell_dtheta

    def cell_center(self, cell: int) -> np.ndarray:
        r_lo, r_hi, th_lo, th_hi = self.cell_bounds(cell)
        return np.array([0.5 * (r_lo + r_hi), 0.5 * (th_lo + th_hi)])

    def cell_area(self, cell: int) -> float:
        """Cartesian area of a polar cell in m^2."""
        r_lo, r_hi, _, _ = self.cell_bounds(cell)
        return 0.5 * (r_hi * r_hi - r_lo * r_lo) * self.cell_dtheta

    @property
    def surveillance_area(self) -> float:
        return math.pi * (self.r_max * self.r_max - self.r_min * self.r_min)


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Range-bearing observations with diagonal Gaussian noise and constant p_D."""

    sigma_r: float
    sigma_theta: float
    p_detect: float
    noise_cov: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.sigma_r <= 0 or self.sigma_theta <= 0:
            raise ValueError("noise standard deviations must be positive")
        if not 0.0 <= self.p_detect <= 1.0:
            raise ValueError(f"p_detect must be in [0, 1], got {self.p_detect}")
        object.__setattr__(self, "noise_cov",
                           np.diag([self.sigma_r ** 2, self.sigma_theta ** 2]))

    def h(self, state: np.ndarray) -> np.ndarray:
        return range_bearing(state)

    def jacobian(self, state: np.ndarray) -> np.ndarray:
        return range_bearing_jacobian(state)


def polar_cell_moments(r_lo: float, r_hi: float, th_lo: float,
                       th_hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Cartesian mean and covariance of a uniform draw over a polar cell.

    Range and bearing are independent and uniform over [r_lo, r_hi] and
    [th_lo, th_hi]; the moments of (r cos t, r sin t) have closed forms.
    """
    dth = th_hi - th_lo
    er = 0.5 * (r_lo + r_hi)
    er2 = (r_lo * r_lo + r_lo * r_hi + r_hi * r_hi) / 3.0
    ec = (math.sin(th_hi) - math.sin(th_lo)) / dth
    es = (math.cos(th_lo) - math.cos(th_hi)) / dth
    s2 = (math.sin(2 * th_hi) - math.sin(2 * th_lo)) / (4.0 * dth)
    ec2 = 0.5 + s2
    es2 = 0.5 - s2
    ecs = (math.cos(2 * th_lo) - math.cos(2 * th_hi)) / (4.0 * dth)

    mean = np.array([er * ec, er * es])
    cov = np.array([
        [er2 * ec2 - mean[0] ** 2, er2 * ecs - mean[0] * mean[1]],
        [er2 * ecs - mean[0] * mean[1], er2 * es2 - mean[1] ** 2],
    ])
    return mean, cov


@dataclass(frozen=True, eq=False)
class BirthModel:
    """Per-cell appearance model.

    With ``per_cell=False`` (default), `intensity` is the appearance
    intensity per m^2 of surveillance area and a cell's birth probability is
    intensity * cell area, clamped to [0, 1]. With ``per_cell=True``,
    `intensity` is itself the constant per-cell birth probability. New
    objects get a cell-matched position prior and a zero-mean velocity prior
    with standard deviation `sigma_v`.
    """

    intensity: float
    sigma_v: float
    per_cell: bool = False

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("birth intensity must be >= 0")
        if self.sigma_v <= 0:
            raise ValueError("birth velocity std must be positive")

    def birth_probability(self, z: np.ndarray, grid: SensorGrid) -> float:
        if self.per_cell:
            return min(1.0, self.intensity)
        return min(1.0, self.intensity * grid.cell_area(grid.cell_of(z)))

    def total_rate(self, grid: SensorGrid) -> float:
        """Expected appearances per scan over the whole surveillance region."""
        if self.per_cell:
            return self.intensity * grid.n_cells
        return self.intensity * grid.surveillance_area

    def birth_law(self, z: np.ndarray, grid: SensorGrid) -> ExtendedLaw:
        """Existence law of a candidate born from observation `z`.

        Newly appeared objects cannot already have disappeared, so the law
        splits between "live in the observed cell" and "never existed".
        """
        beta = self.birth_probability(z, grid)
        if beta == 0.0:
            return ExtendedLaw(p_never=1.0, p_gone=0.0, alive=GaussianMixture())
        pos_mean, pos_cov = polar_cell_moments(*grid.cell_bounds(grid.cell_of(z)))
        mean = np.array([pos_mean[0], pos_mean[1], 0.0, 0.0])
        cov = np.zeros((4, 4))
        cov[:2, :2] = pos_cov
        cov[2, 2] = cov[3, 3] = self.sigma_v ** 2
        component = GaussianComponent(beta, mean, cov)
        return ExtendedLaw(p_never=1.0 - beta, p_gone=0.0,
                           alive=GaussianMixture((component,)))


@dataclass(frozen=True, eq=False)
class ClutterModel:
    """Independent per-cell false alarms with probability p_false_alarm."""

    p_false_alarm: float

    def __post_init__(self):
        if not 0.0 <= self.p_false_alarm <= 1.0:
            raise ValueError(f"p_false_alarm must be in [0, 1], got {self.p_false_alarm}")

    def expected_count(self, grid: SensorGrid) -> float:
        return self.p_false_alarm * grid.n_cells

    def density(self, grid: SensorGrid) -> float:
        """False alarms per unit of (range, bearing) observation volume."""
        return self.p_false_alarm / (grid.cell_dr * grid.cell_dtheta)


@dataclass(frozen=True, eq=False)
class ModelSet:
    """Everything a filter needs about the world."""

    motion: MotionModel
    grid: SensorGrid
    observation: ObservationModel
    birth: BirthModel
    clutter: ClutterModel


@dataclass(frozen=True, eq=False)
class Scan:
    """One time step's observation set with per-observation cell ids."""

    step: int
    observations: np.ndarray  # (m, 2) range-bearing pairs
    cells: np.ndarray         # (m,) flat cell ids

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "cells", np.asarray(self.cells, dtype=int))
        if self.cells.shape != (len(obs),):
            raise ValueError("cells must have one entry per observation")

    def __len__(self) -> int:
        return len(self.observations)


def make_scan(step: int, observations: np.ndarray, grid: SensorGrid) -> Scan:
    """Build a scan, rejecting out-of-bounds or duplicated observations."""
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    cells = np.array([grid.cell_of(z) for z in obs], dtype=int)
    if len(obs) > 1:
        uniq = {(float(z[0]), float(z[1])) for z in obs}
        if len(uniq) != len(obs):
            raise ValueError("scan contains duplicate observations")
    return Scan(step=step, observations=obs, cells=cells)
