"""Association tables and leave-one-out joint weights for the hypothesis filter.

The update step scores every pairing of a hypothesis row with an observation
column (or with a miss). A pairing's posterior share also depends on how well
*everything else* can be jointly matched: those leave-one-out joint
probabilities are the `w` weights. Three engines compute them:

* ``compute_weights_factored`` -- the O(|rows| * |columns|) factorised
  recursion, exact whenever no hypothesis can plausibly explain two
  observations and no observation is plausibly explained by two hypotheses
  (the gating regime), and a controlled approximation otherwise;
* ``compute_weights_exact`` -- literal enumeration of every admissible joint
  association, test-scale only;
* ``compute_weights_exact_sparse`` -- exact values through a
  connected-component decomposition of the gating graph, usable inside the
  filter on sparse real instances.

All masses and weights are kept in the log domain; impossible pairings are
-inf.
"""

from __future__ import annotations

import io
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .gaussian import GaussianComponent, GaussianMixture, ekf_update, wrap_angle
from .hypotheses import Hypothesis
from .models import ModelSet, Scan

__all__ = [
    "AssociationTable",
    "WeightTable",
    "build_table",
    "compute_cz",
    "compute_weights_factored",
    "compute_weights_exact",
    "compute_weights_exact_sparse",
    "log_joint_per_observation_form",
    "dump_table",
]

logger = logging.getLogger(__name__)

LOG_HALF = math.log(0.5)
NEG_INF = -math.inf


def _lse(values) -> float:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return NEG_INF
    hi = float(np.max(arr))
    if not np.isfinite(hi):
        return hi
    return hi + math.log(float(np.sum(np.exp(arr - hi))))


def _row_lse(matrix: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp tolerating rows that are entirely -inf."""
    if matrix.size == 0:
        return np.full(matrix.shape[0], NEG_INF)
    hi = np.max(matrix, axis=1)
    finite = np.isfinite(hi)
    out = np.full(matrix.shape[0], NEG_INF)
    if np.any(finite):
        shifted = matrix[finite] - hi[finite, None]
        out[finite] = hi[finite] + np.log(np.sum(np.exp(shifted), axis=1))
    return out


def _log(x: float) -> float:
    return math.log(x) if x > 0.0 else NEG_INF


@dataclass(frozen=True, eq=False)
class AssociationTable:
    """Log prior pairing masses for one scan.

    Rows are the propagated hypotheses; each observation also carries an
    implicit birth row and an implicit clutter row that can only pair with
    their own column. ``posterior_mixtures`` holds the unit-mass conditional
    state law of each gated (row, column) pairing; ``birth_posteriors`` the
    same for the birth rows.
    """

    log_assoc: np.ndarray         # (n, m); -inf outside the gate
    log_miss: np.ndarray          # (n,)
    log_birth: np.ndarray         # (m,)
    log_birth_miss: np.ndarray    # (m,)
    log_clutter: np.ndarray       # (m,)
    log_clutter_miss: np.ndarray  # (m,)
    row_uids: Tuple[int, ...] = ()
    posterior_mixtures: Dict[Tuple[int, int], GaussianMixture] = None
    birth_posteriors: Tuple[Optional[GaussianComponent], ...] = None

    def __post_init__(self):
        la = np.asarray(self.log_assoc, dtype=float)
        if la.ndim != 2:
            la = la.reshape(len(self.log_miss), -1)
        object.__setattr__(self, "log_assoc", la)
        for name in ("log_miss", "log_birth", "log_birth_miss",
                     "log_clutter", "log_clutter_miss"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.posterior_mixtures is None:
            object.__setattr__(self, "posterior_mixtures", {})
        if self.birth_posteriors is None:
            object.__setattr__(self, "birth_posteriors", (None,) * self.shape[1])
        if not self.row_uids:
            object.__setattr__(self, "row_uids", tuple(range(self.shape[0])))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.log_assoc.shape

    def gated_pairs(self) -> List[Tuple[int, int]]:
        rows, cols = np.nonzero(np.isfinite(self.log_assoc))
        return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Leave-one-out joint weights, log domain.

    ``log_w[i, j]`` weights hypothesis row i paired with observation j;
    ``log_w_miss`` the miss column; ``log_w_birth``/``log_w_clutter`` the
    birth and clutter rows at their own column. ``log_joint`` is the log of
    the total probability over all admissible joint associations. Exact
    engines also fill the birth/clutter miss entries; the factorised engine
    leaves them None (the filter never consumes them) and exposes its
    intermediate per-row sums for diagnostics.
    """

    mode: str
    log_w: np.ndarray
    log_w_miss: np.ndarray
    log_w_birth: np.ndarray
    log_w_clutter: np.ndarray
    log_cz: np.ndarray
    log_joint: float
    log_w_birth_miss: Optional[np.ndarray] = None
    log_w_clutter_miss: Optional[np.ndarray] = None
    log_T: Optional[np.ndarray] = None
    log_T_miss: Optional[np.ndarray] = None
    log_P: Optional[np.ndarray] = None
    log_P_miss: Optional[float] = None


# ---------------------------------------------------------------------------
# Table construction


def build_table(hypotheses: Sequence[Hypothesis], scan: Scan, models: ModelSet,
                gate: float) -> AssociationTable:
    """Score every hypothesis/observation pairing for one scan.

    A propagated row's pairing mass with observation z is
    ``p_detect * sum_k weight_k * N(z; h(mean_k), S_k)`` over its mixture
    components within the squared-Mahalanobis ``gate``; pairings with no
    component in the gate are exactly zero. The miss mass collects the
    undetected, disappeared and never-existed parts of the law. Birth rows
    use the cell-matched appearance law (newborn candidates are detected by
    construction); clutter rows use the per-cell false-alarm probability.
    """
    obs_model = models.observation
    grid = models.grid
    n, m = len(hypotheses), len(scan)
    z_all = scan.observations

    p_d = obs_model.p_detect
    log_pd = _log(p_d)
    log_assoc = np.full((n, m), NEG_INF)
    log_miss = np.empty(n)
    posterior_mixtures: Dict[Tuple[int, int], GaussianMixture] = {}

    # Flatten mixture components over hypotheses for the vectorised gate test.
    comp_row: List[int] = []
    comps: List[GaussianComponent] = []
    for i, hyp in enumerate(hypotheses):
        alive = hyp.law.alive.total_weight
        log_miss[i] = _log((1.0 - p_d) * alive + hyp.law.p_gone + hyp.law.p_never)
        for comp in hyp.law.alive:
            if comp.weight > 0.0:
                comp_row.append(i)
                comps.append(comp)

    gated_per_pair: Dict[Tuple[int, int], List[Tuple[float, np.ndarray, np.ndarray]]] = {}
    if comps and m and p_d > 0.0:
        R = obs_model.noise_cov
        n_comp = len(comps)
        etas = np.empty((n_comp, 2))
        chols = np.empty((n_comp, 2, 2))
        gains = np.empty((n_comp, 4, 2))
        post_covs = np.empty((n_comp, 4, 4))
        log_norms = np.empty(n_comp)
        eye = np.eye(4)
        for k, comp in enumerate(comps):
            H = obs_model.jacobian(comp.mean)
            P = comp.cov
            S = H @ P @ H.T + R
            S = 0.5 * (S + S.T)
            chol = np.linalg.cholesky(S)
            gain = np.linalg.solve(S, H @ P).T
            closure = eye - gain @ H
            cov = closure @ P @ closure.T + gain @ R @ gain.T
            etas[k] = obs_model.h(comp.mean)
            chols[k] = chol
            gains[k] = gain
            post_covs[k] = 0.5 * (cov + cov.T)
            log_norms[k] = (math.log(comp.weight)
                            - math.log(2.0 * math.pi)
                            - float(np.sum(np.log(np.diag(chol)))))

        # The gain, posterior covariance and innovation statistics do not
        # depend on the observation, so the EKF update batches per component
        # across the whole scan.
        diff = z_all[None, :, :] - etas[:, None, :]      # (k, m, 2)
        diff[:, :, 1] = wrap_angle(diff[:, :, 1])
        y0 = diff[:, :, 0] / chols[:, None, 0, 0]
        y1 = (diff[:, :, 1] - chols[:, None, 1, 0] * y0) / chols[:, None, 1, 1]
        mahal2 = y0 * y0 + y1 * y1
        log_marginals = log_norms[:, None] - 0.5 * mahal2

        for k, j in zip(*np.nonzero(mahal2 <= gate)):
            k, j = int(k), int(j)
            mean = comps[k].mean + gains[k] @ diff[k, j]
            gated_per_pair.setdefault((comp_row[k], j), []).append(
                (float(log_marginals[k, j]), mean, post_covs[k]))

        for (i, j), members in gated_per_pair.items():
            logs = np.array([entry[0] for entry in members])
            total = _lse(logs)
            if total == NEG_INF:
                continue
            log_assoc[i, j] = log_pd + total
            weights = np.exp(logs - total)
            posterior_mixtures[(i, j)] = GaussianMixture(tuple(
                GaussianComponent(w, mean, cov)
                for w, (_, mean, cov) in zip(weights, members)))

    log_birth = np.full(m, NEG_INF)
    log_birth_miss = np.zeros(m)
    birth_posteriors: List[Optional[GaussianComponent]] = [None] * m
    for j in range(m):
        law = models.birth.birth_law(z_all[j], grid)
        log_birth_miss[j] = _log(law.p_never)
        if len(law.alive):
            comp = law.alive.components[0]
            upd, marg = ekf_update(comp, z_all[j], obs_model.h,
                                   obs_model.jacobian(comp.mean),
                                   obs_model.noise_cov, angular=(1,))
            if marg > 0.0:
                log_birth[j] = math.log(marg)
                birth_posteriors[j] = upd.scaled(1.0 / upd.weight)

    # Pairing masses of hypothesis and birth rows are likelihood densities in
    # (range, bearing) space, so the per-cell false-alarm probability enters
    # as a density too; posteriors are invariant to this common convention.
    p_fa = models.clutter.p_false_alarm
    log_clutter = np.full(m, _log(models.clutter.density(grid)))
    log_clutter_miss = np.full(m, _log(1.0 - p_fa))

    return AssociationTable(
        log_assoc=log_assoc,
        log_miss=log_miss,
        log_birth=log_birth,
        log_birth_miss=log_birth_miss,
        log_clutter=log_clutter,
        log_clutter_miss=log_clutter_miss,
        row_uids=tuple(h.uid for h in hypotheses),
        posterior_mixtures=posterior_mixtures,
        birth_posteriors=tuple(birth_posteriors),
    )


# ---------------------------------------------------------------------------
# Per-observation normalisers


def log_cz_array(table: AssociationTable) -> np.ndarray:
    """Log of the birth-plus-clutter odds of each observation column."""
    with np.errstate(invalid="ignore"):
        ratio_b = table.log_birth - table.log_birth_miss
        ratio_c = table.log_clutter - table.log_clutter_miss
    m = table.shape[1]
    out = np.empty(m)
    for j in range(m):
        if table.log_birth_miss[j] == NEG_INF or table.log_clutter_miss[j] == NEG_INF:
            raise ValueError(
                f"column {j}: birth or clutter probability of 1 leaves no miss "
                "mass; the per-observation normaliser is undefined")
        out[j] = np.logaddexp(ratio_b[j], ratio_c[j])
    return out


def compute_cz(table: AssociationTable, column: int) -> float:
    """Per-observation normaliser: birth odds plus clutter odds (linear)."""
    value = log_cz_array(table)[column]
    return math.exp(value) if value > NEG_INF else 0.0


# ---------------------------------------------------------------------------
# Factorised weights (linear complexity)


def compute_weights_factored(table: AssociationTable) -> WeightTable:
    """Leave-one-out weights via the factorised recursion.

    Per row: ``S(i, j) = p(i, j) / C_j``, ``T_miss(i) = p_miss(i) + sum_j
    S(i, j)`` and ``T(i, j) = T_miss(i) - S(i, j)``; per column the product
    ``P(j) = prod_i T(i, j)``; then ``w(i, j)`` is the shared constant times
    ``P(j) / T(i, j)``. Everything runs in the log domain: the subtraction
    uses log1p with a direct leave-one-out recompute when one pairing
    dominates its row, and exact zeros divide out by recomputing the
    leave-one-out product directly.
    """
    n, m = table.shape
    log_cz = log_cz_array(table)
    if m and not np.all(log_cz > NEG_INF):
        bad = int(np.nonzero(log_cz == NEG_INF)[0][0])
        raise ValueError(f"column {bad} has zero birth and clutter mass; "
                         "factorised weights are undefined")

    with np.errstate(invalid="ignore"):
        S = table.log_assoc - log_cz[None, :]

    log_T_miss = _row_lse(np.concatenate((table.log_miss[:, None], S), axis=1))
    if np.any(log_T_miss == NEG_INF):
        logger.warning("%d hypothesis rows have zero mass for every pairing "
                       "including the miss; their weights are degenerate",
                       int(np.sum(log_T_miss == NEG_INF)))

    with np.errstate(invalid="ignore"):
        d = S - log_T_miss[:, None]
    log_T = np.where(np.isfinite(S), 0.0, NEG_INF)  # placeholder, filled below
    with np.errstate(invalid="ignore", divide="ignore"):
        log_T = log_T_miss[:, None] + np.where(
            np.isfinite(S), np.log1p(-np.exp(np.minimum(d, 0.0))), 0.0)
    # Rows where a single pairing holds most of the mass lose precision in the
    # log-domain subtraction; recompute those entries directly.
    redo_i, redo_j = np.nonzero(np.isfinite(S) & (d > LOG_HALF))
    for i, j in zip(redo_i.tolist(), redo_j.tolist()):
        others = np.delete(S[i], j)
        log_T[i, j] = _lse(np.concatenate(([table.log_miss[i]], others)))

    finite_T = np.isfinite(log_T)
    n_zero = n - finite_T.sum(axis=0)
    sum_fin = np.where(finite_T, log_T, 0.0).sum(axis=0)
    log_P = np.where(n_zero > 0, NEG_INF, sum_fin)

    miss_finite = np.isfinite(log_T_miss)
    n_zero_miss = n - int(miss_finite.sum())
    sum_fin_miss = float(np.where(miss_finite, log_T_miss, 0.0).sum())
    log_P_miss = NEG_INF if n_zero_miss > 0 else sum_fin_miss

    ext_miss = float(np.sum(table.log_birth_miss) + np.sum(table.log_clutter_miss))
    cz_sum = float(np.sum(log_cz))

    log_w = np.full((n, m), NEG_INF)
    for j in range(m):
        const = ext_miss + cz_sum - log_cz[j]
        if n_zero[j] == 0:
            log_w[:, j] = const + sum_fin[j] - log_T[:, j]
        elif n_zero[j] == 1:
            # P(j) vanished through exactly one row: that row's leave-one-out
            # product is the finite remainder, every other row's weight is 0.
            zero_row = int(np.nonzero(~finite_T[:, j])[0][0])
            log_w[zero_row, j] = const + sum_fin[j]

    log_w_miss = np.full(n, NEG_INF)
    if n_zero_miss == 0:
        log_w_miss = ext_miss + cz_sum + sum_fin_miss - log_T_miss
    elif n_zero_miss == 1:
        zero_row = int(np.nonzero(~miss_finite)[0][0])
        log_w_miss[zero_row] = ext_miss + cz_sum + sum_fin_miss

    log_w_birth = (ext_miss - table.log_birth_miss) + (cz_sum - log_cz) + log_P
    log_w_clutter = (ext_miss - table.log_clutter_miss) + (cz_sum - log_cz) + log_P

    return WeightTable(
        mode="factored",
        log_w=log_w,
        log_w_miss=log_w_miss,
        log_w_birth=log_w_birth,
        log_w_clutter=log_w_clutter,
        log_cz=log_cz,
        log_joint=ext_miss + cz_sum + log_P_miss,
        log_T=log_T,
        log_T_miss=log_T_miss,
        log_P=log_P,
        log_P_miss=log_P_miss,
    )


# ---------------------------------------------------------------------------
# Exact enumeration (test scale)

EXACT_LIMIT = 10


def _admissible_log_sum(table: AssociationTable,
                        skip_row: Optional[int] = None,
                        skip_col: Optional[int] = None,
                        exclude_birth: Optional[int] = None,
                        exclude_clutter: Optional[int] = None) -> float:
    """Log total probability over every admissible joint association.

    An association picks a set of detected rows, an injective assignment of
    those rows to observation columns, and a birth subset of the remaining
    columns; leftover columns are clutter, and every unused row (including
    the implicit birth/clutter rows) contributes its miss mass. ``skip_*``
    remove a row or column from the system (the leave-one-out weights);
    ``exclude_*`` remove one implicit birth or clutter row entirely.
    """
    n, m = table.shape
    rows = [i for i in range(n) if i != skip_row]
    cols = [j for j in range(m) if j != skip_col]

    base = 0.0
    if skip_col is not None:
        if exclude_birth != skip_col:
            base += table.log_birth_miss[skip_col]
        if exclude_clutter != skip_col:
            base += table.log_clutter_miss[skip_col]

    terms: List[float] = []
    for k in range(min(len(rows), len(cols)) + 1):
        for detected in itertools.combinations(rows, k):
            miss_part = base + sum(table.log_miss[i] for i in rows if i not in detected)
            if miss_part == NEG_INF:
                continue
            for assigned in itertools.permutations(cols, k):
                pair_part = miss_part
                for i, j in zip(detected, assigned):
                    pair_part += table.log_assoc[i, j]
                if pair_part == NEG_INF:
                    continue
                matched = set(assigned)
                for j in matched:
                    if exclude_birth != j:
                        pair_part += table.log_birth_miss[j]
                    if exclude_clutter != j:
                        pair_part += table.log_clutter_miss[j]
                if pair_part == NEG_INF:
                    continue
                leftover = [j for j in cols if j not in matched]
                for picks in itertools.product((False, True), repeat=len(leftover)):
                    term = pair_part
                    for j, is_birth in zip(leftover, picks):
                        if is_birth:
                            if exclude_birth == j:
                                term = NEG_INF
                                break
                            term += table.log_birth[j]
                            if exclude_clutter != j:
                                term += table.log_clutter_miss[j]
                        else:
                            if exclude_clutter == j:
                                term = NEG_INF
                                break
                            term += table.log_clutter[j]
                            if exclude_birth != j:
                                term += table.log_birth_miss[j]
                    if term > NEG_INF:
                        terms.append(term)
    return _lse(terms)


def compute_weights_exact(table: AssociationTable) -> WeightTable:
    """Exact leave-one-out weights by literal association enumeration.

    Combinatorial; refuses instances beyond 10 rows or 10 columns.
    """
    n, m = table.shape
    if n > EXACT_LIMIT or m > EXACT_LIMIT:
        raise ValueError(f"exact enumeration refused for {n}x{m} "
                         f"(limit {EXACT_LIMIT}); use the sparse exact engine")

    log_w = np.full((n, m), NEG_INF)
    for i in range(n):
        for j in range(m):
            log_w[i, j] = _admissible_log_sum(table, skip_row=i, skip_col=j)
    log_w_miss = np.array([_admissible_log_sum(table, skip_row=i) for i in range(n)])
    log_w_birth = np.array([
        _admissible_log_sum(table, skip_col=j, exclude_birth=j) for j in range(m)])
    log_w_clutter = np.array([
        _admissible_log_sum(table, skip_col=j, exclude_clutter=j) for j in range(m)])
    log_w_birth_miss = np.array([
        _admissible_log_sum(table, exclude_birth=j) for j in range(m)])
    log_w_clutter_miss = np.array([
        _admissible_log_sum(table, exclude_clutter=j) for j in range(m)])

    return WeightTable(
        mode="exact",
        log_w=log_w,
        log_w_miss=log_w_miss,
        log_w_birth=log_w_birth,
        log_w_clutter=log_w_clutter,
        log_cz=_safe_log_cz(table),
        log_joint=_admissible_log_sum(table),
        log_w_birth_miss=log_w_birth_miss,
        log_w_clutter_miss=log_w_clutter_miss,
    )


def _safe_log_cz(table: AssociationTable) -> np.ndarray:
    try:
        return log_cz_array(table)
    except ValueError:
        return np.full(table.shape[1], np.nan)


# ---------------------------------------------------------------------------
# Exact weights on sparse instances (connected-component factorisation)

COMPONENT_COL_LIMIT = 16


class _Component:
    """One connected block of the row/column gating graph."""

    __slots__ = ("rows", "cols")

    def __init__(self, rows: List[int], cols: List[int]):
        self.rows = rows
        self.cols = cols


def _find_components(gated: np.ndarray) -> List[_Component]:
    n, m = gated.shape
    row_cols = [np.nonzero(gated[i])[0].tolist() for i in range(n)]
    col_rows = [np.nonzero(gated[:, j])[0].tolist() for j in range(m)]
    seen_rows = [False] * n
    seen_cols = [False] * m
    components: List[_Component] = []
    for start in range(n):
        if seen_rows[start]:
            continue
        rows, cols, stack = [], [], [("r", start)]
        seen_rows[start] = True
        while stack:
            kind, idx = stack.pop()
            if kind == "r":
                rows.append(idx)
                for j in row_cols[idx]:
                    if not seen_cols[j]:
                        seen_cols[j] = True
                        stack.append(("c", j))
            else:
                cols.append(idx)
                for i in col_rows[idx]:
                    if not seen_rows[i]:
                        seen_rows[i] = True
                        stack.append(("r", i))
        components.append(_Component(sorted(rows), sorted(cols)))
    return components


def _component_log_sum(table: AssociationTable, rows: Sequence[int],
                       cols: Sequence[int], col_ext: Dict[int, float],
                       skip_row: Optional[int] = None,
                       skip_col: Optional[int] = None) -> float:
    """Matching sum inside one component, exact.

    Sums, over partial injective row-to-column matchings, the product of the
    matched pairing masses, the miss masses of unmatched rows, and the
    external (birth + clutter) odds of unmatched columns. Rows are processed
    in a breadth-first order with a frontier dynamic program: a column only
    occupies a state bit while some unprocessed row can still claim it, so
    wide but chain-like components stay tractable. Components whose active
    frontier exceeds the width limit are refused.
    """
    use_rows = [i for i in rows if i != skip_row]
    use_cols = [j for j in cols if j != skip_col]
    if not use_rows:
        return float(sum(col_ext[j] for j in use_cols))

    gated = {i: [j for j in use_cols if table.log_assoc[i, j] > NEG_INF]
             for i in use_rows}

    # BFS over rows sharing a column keeps chain-like components contiguous.
    col_rows: Dict[int, List[int]] = {}
    for i in use_rows:
        for j in gated[i]:
            col_rows.setdefault(j, []).append(i)
    order: List[int] = []
    seen = set()
    pending = sorted(use_rows, key=lambda i: len(gated[i]))
    queue: List[int] = []
    for start in pending:
        if start in seen:
            continue
        seen.add(start)
        queue.append(start)
        while queue:
            i = queue.pop(0)
            order.append(i)
            for j in gated[i]:
                for other in col_rows[j]:
                    if other not in seen:
                        seen.add(other)
                        queue.append(other)

    last_use = {}
    for pos, i in enumerate(order):
        for j in gated[i]:
            last_use[j] = pos

    active: List[int] = []          # column ids by bit position
    states: Dict[int, float] = {0: 0.0}
    total_isolated = float(sum(col_ext[j] for j in use_cols if j not in last_use))

    for pos, i in enumerate(order):
        for j in gated[i]:
            if j not in active:
                active.append(j)
        if len(active) > COMPONENT_COL_LIMIT:
            raise RuntimeError(
                f"gating component frontier spans {len(active)} observations; "
                "too wide for exact enumeration")
        bit_of = {j: 1 << k for k, j in enumerate(active)}

        miss = table.log_miss[i]
        new_states: Dict[int, float] = {}
        for mask, lp in states.items():
            if miss > NEG_INF:
                prev = new_states.get(mask)
                new_states[mask] = np.logaddexp(prev, lp + miss) if prev is not None else lp + miss
            for j in gated[i]:
                bit = bit_of[j]
                if not mask & bit:
                    val = lp + table.log_assoc[i, j]
                    key = mask | bit
                    prev = new_states.get(key)
                    new_states[key] = np.logaddexp(prev, val) if prev is not None else val
        states = new_states

        # Retire columns that no later row can claim.
        retiring = [j for j in active if last_use[j] == pos]
        for j in retiring:
            bit = bit_of[j]
            folded: Dict[int, float] = {}
            for mask, lp in states.items():
                if mask & bit:
                    key = mask & ~bit
                else:
                    if col_ext[j] == NEG_INF:
                        continue
                    key = mask
                    lp = lp + col_ext[j]
                # Compress bit positions above the retired one.
                high = key >> (bit.bit_length())
                key = (key & (bit - 1)) | (high << (bit.bit_length() - 1))
                prev = folded.get(key)
                folded[key] = np.logaddexp(prev, lp) if prev is not None else lp
            states = folded
            pos_removed = active.index(j)
            active.pop(pos_removed)
            bit_of = {jj: 1 << k for k, jj in enumerate(active)}

        if not states:
            return NEG_INF

    assert not active
    return total_isolated + _lse(list(states.values()))


def compute_weights_exact_sparse(table: AssociationTable) -> WeightTable:
    """Exact weights for gated (sparse) tables of realistic size.

    The matching sum over the whole table factorises over the connected
    components of the gating graph, so each leave-one-out weight only
    re-enumerates the single component containing the removed row/column.
    Values agree with ``compute_weights_exact`` to rounding. Weights are
    filled for gated pairings, all miss entries, and the birth/clutter rows;
    ungated pairings keep -inf (their prior mass is zero anyway).
    """
    n, m = table.shape
    log_cz = log_cz_array(table)
    with np.errstate(invalid="ignore"):
        ratio_b = table.log_birth - table.log_birth_miss
        ratio_c = table.log_clutter - table.log_clutter_miss
    col_ext = {j: log_cz[j] for j in range(m)}

    gated = np.isfinite(table.log_assoc)
    components = _find_components(gated)
    comp_of_row = {}
    comp_of_col = {}
    for ci, comp in enumerate(components):
        for i in comp.rows:
            comp_of_row[i] = ci
        for j in comp.cols:
            comp_of_col[j] = ci
    free_cols = [j for j in range(m) if j not in comp_of_col]

    comp_logM = [_component_log_sum(table, c.rows, c.cols, col_ext)
                 for c in components]
    sum_M = float(sum(comp_logM))
    free_sum = float(sum(log_cz[j] for j in free_cols))
    ext_miss = float(np.sum(table.log_birth_miss) + np.sum(table.log_clutter_miss))
    log_joint = ext_miss + free_sum + sum_M

    def others(ci: Optional[int]) -> float:
        if ci is None:
            return sum_M
        return sum_M - comp_logM[ci]

    log_w = np.full((n, m), NEG_INF)
    log_w_miss = np.empty(n)
    for i in range(n):
        ci = comp_of_row[i]
        comp = components[ci]
        log_w_miss[i] = ext_miss + free_sum + others(ci) + _component_log_sum(
            table, comp.rows, comp.cols, col_ext, skip_row=i)
        for j in comp.cols:
            if gated[i, j]:
                log_w[i, j] = ext_miss + free_sum + others(ci) + _component_log_sum(
                    table, comp.rows, comp.cols, col_ext, skip_row=i, skip_col=j)

    log_w_birth = np.empty(m)
    log_w_clutter = np.empty(m)
    log_w_birth_miss = np.empty(m)
    log_w_clutter_miss = np.empty(m)
    for j in range(m):
        ci = comp_of_col.get(j)
        if ci is None:
            without_col = ext_miss + (free_sum - log_cz[j]) + sum_M
            base_override = ext_miss + (free_sum - log_cz[j]) + sum_M
            with_op_only = base_override + ratio_c[j]
            with_b_only = base_override + ratio_b[j]
        else:
            comp = components[ci]
            reduced = _component_log_sum(table, comp.rows, comp.cols, col_ext,
                                         skip_col=j)
            without_col = ext_miss + free_sum + others(ci) + reduced
            op_only = _component_log_sum(table, comp.rows, comp.cols,
                                         {**col_ext, j: ratio_c[j]})
            b_only = _component_log_sum(table, comp.rows, comp.cols,
                                        {**col_ext, j: ratio_b[j]})
            with_op_only = ext_miss + free_sum + others(ci) + op_only
            with_b_only = ext_miss + free_sum + others(ci) + b_only
        log_w_birth[j] = without_col - table.log_birth_miss[j]
        log_w_clutter[j] = without_col - table.log_clutter_miss[j]
        log_w_birth_miss[j] = with_op_only - table.log_birth_miss[j]
        log_w_clutter_miss[j] = with_b_only - table.log_clutter_miss[j]

    return WeightTable(
        mode="exact-sparse",
        log_w=log_w,
        log_w_miss=log_w_miss,
        log_w_birth=log_w_birth,
        log_w_clutter=log_w_clutter,
        log_cz=log_cz,
        log_joint=log_joint,
        log_w_birth_miss=log_w_birth_miss,
        log_w_clutter_miss=log_w_clutter_miss,
    )


# ---------------------------------------------------------------------------
# Alternative factorisation of the joint probability (check only)


def log_joint_per_observation_form(table: AssociationTable) -> float:
    """Joint probability factorised per observation instead of per row.

    Returns ``log`` of the product over all row miss masses (hypothesis,
    birth and clutter rows) times, per observation, the column's external
    odds plus the detection odds of every hypothesis row. The form is exact
    when no two rows plausibly explain the same observation; it is a
    consistency check, not a filter path. Rows with zero miss mass are
    refused (the per-row odds are undefined there).
    """
    n, m = table.shape
    if np.any(table.log_miss == NEG_INF):
        raise ValueError("per-observation factorisation undefined: a row has "
                         "zero miss mass")
    log_cz = log_cz_array(table)
    total = float(np.sum(table.log_miss)) + float(
        np.sum(table.log_birth_miss) + np.sum(table.log_clutter_miss))
    with np.errstate(invalid="ignore"):
        odds = table.log_assoc - table.log_miss[:, None]
    for j in range(m):
        total += _lse(np.concatenate(([log_cz[j]], odds[:, j])))
    return total


# ---------------------------------------------------------------------------
# Diagnostics


def dump_table(table: AssociationTable, out: TextIO,
               weights: Optional[WeightTable] = None) -> None:
    """Write the table (and optionally its weights) as tab-separated text."""
    n, m = table.shape
    header = "row\tcolumn\tlog_mass" + ("\tlog_weight" if weights else "")
    print(header, file=out)

    def emit(row_id: str, col_id: str, mass: float, weight: Optional[float]) -> None:
        line = f"{row_id}\t{col_id}\t{mass:.12g}"
        if weights is not None:
            line += f"\t{weight:.12g}" if weight is not None else "\t"
        print(line, file=out)

    for i in range(n):
        uid = table.row_uids[i]
        emit(f"hyp{uid}", "miss", table.log_miss[i],
             weights.log_w_miss[i] if weights else None)
        for j in range(m):
            if np.isfinite(table.log_assoc[i, j]):
                emit(f"hyp{uid}", f"z{j}", table.log_assoc[i, j],
                     weights.log_w[i, j] if weights else None)
    for j in range(m):
        emit(f"birth{j}", f"z{j}", table.log_birth[j],
             weights.log_w_birth[j] if weights else None)
        emit(f"birth{j}", "miss", table.log_birth_miss[j],
             weights.log_w_birth_miss[j]
             if weights is not None and weights.log_w_birth_miss is not None else None)
        emit(f"clutter{j}", f"z{j}", table.log_clutter[j],
             weights.log_w_clutter[j] if weights else None)
        emit(f"clutter{j}", "miss", table.log_clutter_miss[j],
             weights.log_w_clutter_miss[j]
             if weights is not None and weights.log_w_clutter_miss is not None else None)
