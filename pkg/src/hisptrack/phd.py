"""Gaussian-mixture intensity filter baseline with matched models.

Propagates the first-moment intensity of the object population as a Gaussian
mixture: survival-scaled prediction plus measurement-driven birth, then the
standard missed-detection and per-observation update terms against a clutter
density, followed by the same pruning and merging used by the hypothesis
filter. Estimates are the means of components above an extraction weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .gaussian import (
    GaussianComponent,
    GaussianMixture,
    ekf_update,
    kalman_predict,
    merge,
    prune,
    wrap_angle,
)
from .models import ModelSet, MotionModel, Scan
from .models import polar_cell_moments

__all__ = [
    "PhdConfig",
    "adaptive_birth",
    "phd_predict",
    "phd_update",
    "phd_extract",
    "PhdFilter",
]


@dataclass(frozen=True)
class PhdConfig:
    prune_threshold: float = 1e-5
    merge_distance: float = 4.0
    max_components: int = 1000
    extract_threshold: float = 0.5
    gate: float = 25.0


def adaptive_birth(previous_observations: Optional[np.ndarray],
                   models: ModelSet) -> GaussianMixture:
    """Birth intensity placed at the previous scan's observations.

    The total birth weight is the appearance intensity integrated over the
    surveillance region, split evenly across the previous observations; each
    component uses the cell-matched position prior and the zero-mean velocity
    prior of the appearance model.
    """
    if previous_observations is None or len(previous_observations) == 0:
        return GaussianMixture()
    total = models.birth.total_rate(models.grid)
    if total <= 0.0:
        return GaussianMixture()
    weight = total / len(previous_observations)
    comps: List[GaussianComponent] = []
    for z in previous_observations:
        pos_mean, pos_cov = polar_cell_moments(
            *models.grid.cell_bounds(models.grid.cell_of(z)))
        mean = np.array([pos_mean[0], pos_mean[1], 0.0, 0.0])
        cov = np.zeros((4, 4))
        cov[:2, :2] = pos_cov
        cov[2, 2] = cov[3, 3] = models.birth.sigma_v ** 2
        comps.append(GaussianComponent(weight, mean, cov))
    return GaussianMixture(tuple(comps))


def phd_predict(intensity: GaussianMixture, motion: MotionModel,
                birth: GaussianMixture) -> GaussianMixture:
    """Survival-scaled prediction of every component plus the birth terms."""
    predicted = tuple(
        kalman_predict(c.scaled(motion.p_survive), motion.transition,
                       motion.process_noise)
        for c in intensity)
    return GaussianMixture(predicted + birth.components)


def phd_update(intensity: GaussianMixture, scan: Scan, models: ModelSet,
               config: PhdConfig) -> GaussianMixture:
    """Standard intensity update against one scan, then mixture reduction."""
    obs_model = models.observation
    p_d = obs_model.p_detect
    kappa = models.clutter.density(models.grid)

    comps = list(intensity.components)
    updated: List[GaussianComponent] = [c.scaled(1.0 - p_d) for c in comps]

    if comps and len(scan) and p_d > 0.0:
        R = obs_model.noise_cov
        etas = np.empty((len(comps), 2))
        chols = np.empty((len(comps), 2, 2))
        jacs = []
        for k, c in enumerate(comps):
            H = obs_model.jacobian(c.mean)
            S = H @ c.cov @ H.T + R
            etas[k] = obs_model.h(c.mean)
            chols[k] = np.linalg.cholesky(0.5 * (S + S.T))
            jacs.append(H)
        diff = scan.observations[None, :, :] - etas[:, None, :]
        diff[:, :, 1] = wrap_angle(diff[:, :, 1])
        y0 = diff[:, :, 0] / chols[:, None, 0, 0]
        y1 = (diff[:, :, 1] - chols[:, None, 1, 0] * y0) / chols[:, None, 1, 1]
        mahal2 = y0 * y0 + y1 * y1

        for j in range(len(scan)):
            in_gate = np.nonzero(mahal2[:, j] <= config.gate)[0]
            if in_gate.size == 0:
                continue
            news, weights = [], []
            for k in in_gate:
                comp_upd, marg = ekf_update(comps[k], scan.observations[j],
                                            obs_model.h, jacs[k], R, angular=(1,))
                news.append(comp_upd)
                weights.append(p_d * marg)
            den = kappa + float(sum(weights))
            for comp_upd, w in zip(news, weights):
                if w > 0.0:
                    updated.append(GaussianComponent(w / den, comp_upd.mean,
                                                     comp_upd.cov))

    mixture = GaussianMixture(tuple(updated))
    mixture, _ = prune(mixture, config.prune_threshold)
    mixture = merge(mixture, config.merge_distance)
    if len(mixture) > config.max_components:
        total = mixture.total_weight
        top = sorted(mixture.components, key=lambda c: -c.weight)[:config.max_components]
        kept_total = sum(c.weight for c in top)
        mixture = GaussianMixture(tuple(c.scaled(total / kept_total) for c in top))
    return mixture


def phd_extract(intensity: GaussianMixture,
                threshold: float = 0.5) -> List[np.ndarray]:
    """Means of components whose weight exceeds the extraction threshold."""
    return [c.mean.copy() for c in intensity if c.weight > threshold]


class PhdFilter:
    """Runs the intensity recursion with measurement-driven birth."""

    def __init__(self, models: ModelSet, config: Optional[PhdConfig] = None):
        self.models = models
        self.config = config or PhdConfig()
        self.intensity = GaussianMixture()
        self._previous_observations: Optional[np.ndarray] = None

    def step(self, scan: Scan) -> List[np.ndarray]:
        birth = adaptive_birth(self._previous_observations, self.models)
        self.intensity = phd_predict(self.intensity, self.models.motion, birth)
        self.intensity = phd_update(self.intensity, scan, self.models, self.config)
        self._previous_observations = scan.observations.copy()
        return phd_extract(self.intensity, self.config.extract_threshold)
