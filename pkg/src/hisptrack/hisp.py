"""Hypothesis-level multi-object filter: predict, update, reduce, extract.

Each hypothesis is one candidate object carrying an existence-augmented law.
Prediction pushes the live mixture through the motion model and moves the
non-surviving mass to "disappeared". The observation update spawns, for every
hypothesis, one child per gated observation (normalised per observation
column, together with the birth and clutter explanations of that column) and
one missed child (normalised across the hypothesis's own row), so that every
child's law again sums to one with the residue on "never existed". Reduction
prunes negligible hypotheses, merges hypotheses that share their latest
observation and overlap in state, and applies the confirmation hysteresis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .association import (
    AssociationTable,
    WeightTable,
    build_table,
    compute_weights_exact_sparse,
    compute_weights_factored,
    _lse,
    _row_lse,
)
from .gaussian import GaussianComponent, GaussianMixture, kalman_predict, merge, prune
from .hypotheses import (
    ExtendedLaw,
    Hypothesis,
    HypothesisKind,
    ObservationPath,
    PotentialIndividual,
    alive_probability,
    update_confirmation,
)
from .models import ModelSet, MotionModel, Scan

__all__ = [
    "HispConfig",
    "FilterState",
    "UpdateResult",
    "StepDiagnostics",
    "time_update",
    "observation_update",
    "reduce_hypotheses",
    "extract_estimates",
    "HispFilter",
]

logger = logging.getLogger(__name__)

NEG_INF = -math.inf


@dataclass(frozen=True)
class HispConfig:
    """Thresholds of the recursion.

    weights_mode selects the association engine: "factored" is the
    linear-complexity production path, "exact" enumerates matchings inside
    gating components and is meant for verification on sparse instances.
    """

    prune_threshold: float = 1e-5
    merge_distance: float = 4.0
    confirm_threshold: float = 0.99
    keep_confirmed_threshold: float = 0.9
    gate: float = 25.0
    weights_mode: str = "factored"
    collect_masses: bool = False
    # Hard cap on the hypothesis count after reduction (lowest live
    # probabilities dropped first); purely a cost control.
    max_hypotheses: int = 500

    def __post_init__(self):
        if self.weights_mode not in ("factored", "exact"):
            raise ValueError(f"unknown weights_mode {self.weights_mode!r}")
        if self.max_hypotheses < 1:
            raise ValueError("max_hypotheses must be positive")


@dataclass(frozen=True)
class FilterState:
    step: int = -1
    hypotheses: Tuple[Hypothesis, ...] = ()
    next_uid: int = 0


@dataclass(frozen=True)
class UpdateResult:
    state: FilterState
    log_joint: float
    # Max relative departure of the per-column / per-row normalisations from
    # the shared joint probability; only meaningful with exact weights.
    column_identity_error: Optional[float] = None
    row_identity_error: Optional[float] = None
    # (kind, index, column) -> posterior pairing mass, for oracle tests.
    masses: Optional[Dict[Tuple, float]] = None


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    n_observations: int
    n_before_reduction: int
    n_after_reduction: int
    n_confirmed: int
    log_joint: float
    column_identity_error: Optional[float]
    row_identity_error: Optional[float]
    estimates: np.ndarray
    estimate_uids: Tuple[int, ...]


def time_update(state: FilterState, motion: MotionModel) -> FilterState:
    """Push every hypothesis one step forward.

    Live mass survives with probability p_survive and moves through the
    constant-velocity kernel; the rest of the live mass becomes
    "disappeared". Disappeared and never-existed masses are absorbing, so
    each law still sums to one and the hypothesis set maps one-to-one.
    """
    p_s = motion.p_survive
    updated = []
    for hyp in state.hypotheses:
        alive = hyp.law.alive.total_weight
        comps = tuple(
            kalman_predict(c.scaled(p_s), motion.transition, motion.process_noise)
            for c in hyp.law.alive)
        law = ExtendedLaw(
            p_never=hyp.law.p_never,
            p_gone=hyp.law.p_gone + (1.0 - p_s) * alive,
            alive=GaussianMixture(comps))
        updated.append(replace(hyp, law=law))
    return FilterState(step=state.step + 1, hypotheses=tuple(updated),
                       next_uid=state.next_uid)


def observation_update(state: FilterState, scan: Scan, models: ModelSet,
                       config: HispConfig) -> UpdateResult:
    """Bayes update of the hypothesis set against one scan."""
    if scan.step != state.step:
        raise ValueError(f"scan step {scan.step} does not match state step {state.step}")

    hyps = state.hypotheses
    table = build_table(hyps, scan, models, config.gate)
    if config.weights_mode == "exact":
        wt = compute_weights_exact_sparse(table)
    else:
        wt = compute_weights_factored(table)

    n, m = table.shape
    with np.errstate(invalid="ignore"):
        num = wt.log_w + table.log_assoc
        num_miss = wt.log_w_miss + table.log_miss
        num_birth = wt.log_w_birth + table.log_birth
        num_clutter = wt.log_w_clutter + table.log_clutter

    col_den = _row_lse(np.vstack((num, num_birth[None, :], num_clutter[None, :])).T) \
        if m else np.empty(0)
    row_den = _row_lse(np.concatenate((num, num_miss[:, None]), axis=1)) \
        if n else np.empty(0)

    p_d = models.observation.p_detect
    next_uid = state.next_uid
    children: List[Hypothesis] = []
    masses: Optional[Dict[Tuple, float]] = {} if config.collect_masses else None

    # Children of detected pairings: normalised per observation column.
    for (i, j) in table.gated_pairs():
        mass = math.exp(num[i, j] - col_den[j]) if num[i, j] > NEG_INF else 0.0
        if masses is not None:
            masses[("hyp", i, j)] = mass
        if mass <= 0.0:
            continue
        parent = hyps[i]
        mixture = table.posterior_mixtures[(i, j)].scaled(mass)
        law = ExtendedLaw(p_never=max(0.0, 1.0 - mass), p_gone=0.0, alive=mixture)
        individual = replace(parent.individual,
                             path=parent.individual.path.extended((scan.step, j)))
        children.append(Hypothesis(uid=next_uid, individual=individual, law=law,
                                   confirmed=parent.confirmed))
        next_uid += 1

    # Missed children: normalised across the hypothesis's own row.
    for i in range(n):
        mass = math.exp(num_miss[i] - row_den[i]) if num_miss[i] > NEG_INF else 0.0
        if masses is not None:
            masses[("hyp", i, None)] = mass
        if mass <= 0.0:
            continue
        parent = hyps[i]
        base = math.exp(table.log_miss[i])
        scale = mass / base
        alive = parent.law.alive.scaled((1.0 - p_d) * scale)
        gone = parent.law.p_gone * scale
        never = max(0.0, 1.0 - alive.total_weight - gone)
        law = ExtendedLaw(p_never=never, p_gone=gone, alive=alive)
        individual = replace(parent.individual,
                             path=parent.individual.path.extended(None))
        children.append(Hypothesis(uid=next_uid, individual=individual, law=law,
                                   confirmed=parent.confirmed))
        next_uid += 1

    # Newborn children, one per observation, detected by construction.
    for j in range(m):
        mass = math.exp(num_birth[j] - col_den[j]) if num_birth[j] > NEG_INF else 0.0
        if masses is not None:
            masses[("birth", j)] = mass
            masses[("clutter", j)] = (math.exp(num_clutter[j] - col_den[j])
                                      if num_clutter[j] > NEG_INF else 0.0)
        if mass <= 0.0 or table.birth_posteriors[j] is None:
            continue
        comp = table.birth_posteriors[j].scaled(mass)
        law = ExtendedLaw(p_never=max(0.0, 1.0 - mass), p_gone=0.0,
                          alive=GaussianMixture((comp,)))
        individual = PotentialIndividual(
            birth_step=scan.step,
            path=ObservationPath(start=scan.step, entries=((scan.step, j),)),
            kind=HypothesisKind.PROPAGATED)
        children.append(Hypothesis(uid=next_uid, individual=individual, law=law))
        next_uid += 1

    col_err = row_err = None
    if wt.mode.startswith("exact"):
        errs = [abs(math.exp(c - wt.log_joint) - 1.0) for c in col_den]
        col_err = max(errs, default=0.0)
        row_errs = [abs(math.exp(r - wt.log_joint) - 1.0) for r in row_den]
        for j in range(m):
            den_b = _lse([num_birth[j], wt.log_w_birth_miss[j] + table.log_birth_miss[j]])
            den_c = _lse([num_clutter[j], wt.log_w_clutter_miss[j] + table.log_clutter_miss[j]])
            row_errs.append(abs(math.exp(den_b - wt.log_joint) - 1.0))
            row_errs.append(abs(math.exp(den_c - wt.log_joint) - 1.0))
        row_err = max(row_errs, default=0.0)

    new_state = FilterState(step=state.step, hypotheses=tuple(children),
                            next_uid=next_uid)
    return UpdateResult(state=new_state, log_joint=wt.log_joint,
                        column_identity_error=col_err, row_identity_error=row_err,
                        masses=masses)


def _reduce_law(law: ExtendedLaw, config: HispConfig) -> ExtendedLaw:
    """Prune and merge one law's live mixture, conserving its live mass."""
    total = law.alive.total_weight
    if total <= 0.0 or len(law.alive) <= 1:
        return law
    pruned, _ = prune(law.alive, config.prune_threshold * total)
    if len(pruned) == 0:
        pruned = GaussianMixture((max(law.alive, key=lambda c: c.weight),))
    merged = merge(pruned, config.merge_distance)
    return ExtendedLaw(p_never=law.p_never, p_gone=law.p_gone,
                       alive=merged.scaled(total / merged.total_weight))


def _dominant(hyp: Hypothesis) -> GaussianComponent:
    return max(hyp.law.alive, key=lambda c: c.weight)


def _merge_pair_laws(members: Sequence[Hypothesis], config: HispConfig) -> ExtendedLaw:
    """Combine laws of hypotheses assumed to describe the same object.

    Live probabilities add but saturate at one; the live mixtures are pooled
    and moment-matched.
    """
    alive_sum = sum(alive_probability(h.law) for h in members)
    alive_new = min(1.0, alive_sum)
    gone_new = min(1.0 - alive_new, sum(h.law.p_gone for h in members))
    comps: List[GaussianComponent] = []
    for h in members:
        comps.extend(h.law.alive.components)
    pooled = merge(GaussianMixture(tuple(comps)), config.merge_distance)
    pooled = pooled.scaled(alive_new / pooled.total_weight)
    return ExtendedLaw(p_never=max(0.0, 1.0 - alive_new - gone_new),
                       p_gone=gone_new, alive=pooled)


def reduce_hypotheses(state: FilterState, config: HispConfig) -> FilterState:
    """Prune, merge and re-confirm the hypothesis set.

    Hypotheses whose live probability fell below the prune threshold are
    dropped. Hypotheses are then greedily merged (highest live probability
    first) whenever their dominant components sit within the
    squared-Mahalanobis merge distance: they are assumed to describe the same
    object, so their probabilities add, saturating at one. Confirmation
    hysteresis runs last.
    """
    kept = [h for h in state.hypotheses
            if alive_probability(h.law) >= config.prune_threshold]
    kept = [replace(h, law=_reduce_law(h.law, config)) for h in kept]

    merged = _merge_group(kept, config)

    if len(merged) > config.max_hypotheses:
        merged.sort(key=lambda h: -alive_probability(h.law))
        merged = merged[:config.max_hypotheses]

    confirmed = tuple(
        update_confirmation(h, config.confirm_threshold,
                            config.keep_confirmed_threshold)
        for h in merged)
    return FilterState(step=state.step, hypotheses=confirmed,
                       next_uid=state.next_uid)


def _merge_group(group: List[Hypothesis], config: HispConfig) -> List[Hypothesis]:
    """Greedy high-probability-first merging of same-object hypotheses.

    Two hypotheses are deemed the same object when their dominant-component
    positions agree to within the squared-Mahalanobis merge distance in the
    anchor's position metric; velocity is left out of the test because
    association splits displace it transiently. Candidates are binned on
    position; an anchor only scans the bucket rings inside
    sqrt(merge_distance * trace(position cov)), with a Euclidean prefilter
    ahead of the Mahalanobis test.
    """
    if len(group) <= 1:
        return group
    empty = [h for h in group if len(h.law.alive) == 0]
    live = [h for h in group if len(h.law.alive)]
    if not live:
        return group
    doms = [_dominant(h) for h in live]
    means = np.array([d.mean for d in doms])
    alive = np.array([alive_probability(h.law) for h in live])
    order = np.argsort(-alive, kind="stable")

    width = 25.0  # bucket granularity [m]
    buckets: Dict[Tuple[int, int], List[int]] = {}
    for k in range(len(live)):
        key = (int(means[k, 0] // width), int(means[k, 1] // width))
        buckets.setdefault(key, []).append(k)

    consumed = np.zeros(len(live), dtype=bool)
    out = list(empty)
    positions = means[:, :2]
    for k in order:
        k = int(k)
        if consumed[k]:
            continue
        consumed[k] = True
        anchor = live[k]
        pivot = doms[k]
        pos_cov = pivot.cov[:2, :2]
        # Mahalanobis <= d implies Euclidean^2 <= d * lambda_max <= d * trace.
        radius2 = config.merge_distance * float(np.trace(pos_cov))
        radius = math.sqrt(radius2)
        bx0 = int((pivot.mean[0] - radius) // width)
        bx1 = int((pivot.mean[0] + radius) // width)
        by0 = int((pivot.mean[1] - radius) // width)
        by1 = int((pivot.mean[1] + radius) // width)
        candidates: List[int] = []
        for nx in range(bx0, bx1 + 1):
            for ny in range(by0, by1 + 1):
                for other_k in buckets.get((nx, ny), ()):
                    if not consumed[other_k]:
                        candidates.append(other_k)
        absorbed = [anchor]
        if candidates:
            diffs = positions[candidates] - pivot.mean[:2]
            near = np.einsum("ij,ij->i", diffs, diffs) <= radius2
            if np.any(near):
                idx = np.asarray(candidates)[near]
                chol = np.linalg.cholesky(pos_cov)
                y = solve_triangular(chol, (positions[idx] - pivot.mean[:2]).T,
                                     lower=True)
                d2 = np.sum(y * y, axis=0)
                for other_k, dist2 in zip(idx.tolist(), d2.tolist()):
                    if dist2 <= config.merge_distance:
                        consumed[other_k] = True
                        absorbed.append(live[other_k])
        if len(absorbed) == 1:
            out.append(anchor)
        else:
            law = _merge_pair_laws(absorbed, config)
            out.append(Hypothesis(
                uid=anchor.uid, individual=anchor.individual, law=law,
                confirmed=any(h.confirmed for h in absorbed)))
    return out


def extract_estimates(state: FilterState) -> List[Tuple[np.ndarray, int]]:
    """State estimate of every confirmed hypothesis: its dominant-component mean."""
    out = []
    for h in state.hypotheses:
        if h.confirmed and len(h.law.alive):
            out.append((_dominant(h).mean.copy(), h.uid))
    return out


class HispFilter:
    """Convenience wrapper running the full recursion scan by scan."""

    def __init__(self, models: ModelSet, config: Optional[HispConfig] = None):
        self.models = models
        self.config = config or HispConfig()
        self.state = FilterState()

    def step(self, scan: Scan) -> StepDiagnostics:
        self.state = time_update(self.state, self.models.motion)
        result = observation_update(self.state, scan, self.models, self.config)
        n_before = len(result.state.hypotheses)
        self.state = reduce_hypotheses(result.state, self.config)
        estimates = extract_estimates(self.state)
        diag = StepDiagnostics(
            step=scan.step,
            n_observations=len(scan),
            n_before_reduction=n_before,
            n_after_reduction=len(self.state.hypotheses),
            n_confirmed=sum(1 for h in self.state.hypotheses if h.confirmed),
            log_joint=result.log_joint,
            column_identity_error=result.column_identity_error,
            row_identity_error=result.row_identity_error,
            estimates=(np.array([e[0] for e in estimates])
                       if estimates else np.empty((0, 4))),
            estimate_uids=tuple(e[1] for e in estimates),
        )
        logger.debug("step %d: %d obs, %d->%d hypotheses, %d confirmed, "
                     "log joint %.6g", diag.step, diag.n_observations,
                     diag.n_before_reduction, diag.n_after_reduction,
                     diag.n_confirmed, diag.log_joint)
        return diag

    def run(self, scans: Sequence[Scan]) -> List[StepDiagnostics]:
        return [self.step(scan) for scan in scans]
