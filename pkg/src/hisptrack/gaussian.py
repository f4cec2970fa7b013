"""Gaussian component algebra: densities, Kalman/EKF steps, mixture reduction."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "GaussianComponent",
    "GaussianMixture",
    "wrap_angle",
    "log_gaussian",
    "gaussian_eval",
    "kalman_predict",
    "ekf_update",
    "prune",
    "merge",
]

LOG_2PI = math.log(2.0 * math.pi)


def wrap_angle(theta):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """Weighted Gaussian over the state space.

    The tracking convention is a 4-dim state [x, y, vx, vy] in SI units, but
    nothing here depends on the dimension. The covariance must be symmetric
    positive-definite; values are treated as immutable once constructed.
    """

    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if self.weight < 0.0 or not math.isfinite(self.weight):
            raise ValueError(f"component weight must be finite and >= 0, got {self.weight}")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match state dim {mean.size}")
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if asym > 1e-9 * scale:
            raise ValueError("covariance is not symmetric to 1e-9 relative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def scaled(self, factor: float) -> "GaussianComponent":
        return replace(self, weight=self.weight * factor)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Ordered collection of Gaussian components; empty mixtures are allowed."""

    components: Tuple[GaussianComponent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self) -> Iterator[GaussianComponent]:
        return iter(self.components)

    @property
    def total_weight(self) -> float:
        return float(sum(c.weight for c in self.components))

    def scaled(self, factor: float) -> "GaussianMixture":
        return GaussianMixture(tuple(c.scaled(factor) for c in self.components))


def log_gaussian(point: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(mean, cov) at `point`.

    Raises np.linalg.LinAlgError if the covariance is not positive-definite.
    """
    diff = np.asarray(point, dtype=float) - np.asarray(mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    alpha = np.linalg.solve(chol, diff)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (float(alpha @ alpha) + diff.size * LOG_2PI + log_det)


def gaussian_eval(component: GaussianComponent, point: np.ndarray) -> float:
    """Weighted density `weight * N(point; mean, cov)`; zero weight gives 0."""
    if component.weight == 0.0:
        return 0.0
    return component.weight * math.exp(log_gaussian(point, component.mean, component.cov))


def kalman_predict(component: GaussianComponent, transition: np.ndarray,
                   process_noise: np.ndarray) -> GaussianComponent:
    """Linear prediction: mean -> F m, cov -> F P F^T + Q, weight unchanged."""
    transition = np.asarray(transition, dtype=float)
    mean = transition @ component.mean
    cov = symmetrize(transition @ component.cov @ transition.T + np.asarray(process_noise, dtype=float))
    return GaussianComponent(component.weight, mean, cov)


def ekf_update(component: GaussianComponent, z: np.ndarray,
               h: Callable[[np.ndarray], np.ndarray], jacobian: np.ndarray,
               noise_cov: np.ndarray,
               angular: Sequence[int] = ()) -> Tuple[GaussianComponent, float]:
    """First-order EKF update of one component against observation `z`.

    `h` maps a state to observation space and `jacobian` is its Jacobian at
    the component mean. Innovation entries listed in `angular` are wrapped to
    (-pi, pi]. Returns the updated component (unchanged weight) and the
    marginal likelihood `weight * N(z; h(mean), H P H^T + R)`.

    Raises np.linalg.LinAlgError when the innovation covariance is singular.
    """
    H = np.asarray(jacobian, dtype=float)
    z = np.asarray(z, dtype=float)
    P = component.cov
    S = symmetrize(H @ P @ H.T + np.asarray(noise_cov, dtype=float))
    chol = np.linalg.cholesky(S)

    innovation = z - h(component.mean)
    for k in angular:
        innovation[k] = wrap_angle(innovation[k])

    alpha = np.linalg.solve(chol, innovation)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    log_density = -0.5 * (float(alpha @ alpha) + z.size * LOG_2PI + log_det)
    marginal = component.weight * math.exp(log_density)

    gain = np.linalg.solve(S, H @ P).T
    mean = component.mean + gain @ innovation
    # Joseph form keeps the covariance PSD under roundoff.
    closure = np.eye(component.dim) - gain @ H
    cov = symmetrize(closure @ P @ closure.T + gain @ noise_cov @ gain.T)
    return GaussianComponent(component.weight, mean, cov), marginal


def prune(mixture: GaussianMixture, threshold: float) -> Tuple[GaussianMixture, float]:
    """Drop components with weight < threshold; also return the removed mass."""
    if threshold < 0.0:
        raise ValueError(f"prune threshold must be >= 0, got {threshold}")
    kept = tuple(c for c in mixture if c.weight >= threshold)
    removed = float(sum(c.weight for c in mixture if c.weight < threshold))
    return GaussianMixture(kept), removed


def merge(mixture: GaussianMixture, distance: float) -> GaussianMixture:
    """Greedy mixture reduction by moment matching.

    Repeatedly takes the highest-weight remaining component and absorbs every
    component within squared Mahalanobis `distance` of it, measured in the
    absorbing component's covariance metric. Total weight is conserved.
    """
    if distance < 0.0:
        raise ValueError(f"merge distance must be >= 0, got {distance}")
    if len(mixture) <= 1:
        return mixture

    comps = mixture.components
    means = np.array([c.mean for c in comps])
    weights = np.array([c.weight for c in comps])
    alive = np.ones(len(comps), dtype=bool)
    merged = []
    while np.any(alive):
        idx = np.nonzero(alive)[0]
        pivot = comps[idx[np.argmax(weights[idx])]]
        chol = np.linalg.cholesky(pivot.cov)
        y = solve_triangular(chol, (means[idx] - pivot.mean).T, lower=True)
        d2 = np.sum(y * y, axis=0)
        members = idx[d2 <= distance]
        merged.append(_moment_match([comps[k] for k in members]))
        alive[members] = False
    merged.sort(key=lambda c: -c.weight)
    return GaussianMixture(tuple(merged))


def _moment_match(components: Sequence[GaussianComponent]) -> GaussianComponent:
    total = sum(c.weight for c in components)
    if len(components) == 1:
        return components[0]
    mean = sum(c.weight * c.mean for c in components) / total
    cov = np.zeros_like(components[0].cov)
    for c in components:
        d = c.mean - mean
        cov += c.weight * (c.cov + np.outer(d, d))
    return GaussianComponent(total, mean, symmetrize(cov / total))
