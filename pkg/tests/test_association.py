import io
import math

import numpy as np
import pytest

from hisptrack.association import (
    AssociationTable,
    build_table,
    compute_cz,
    compute_weights_exact,
    compute_weights_exact_sparse,
    compute_weights_factored,
    dump_table,
    log_joint_per_observation_form,
)
from hisptrack.cli import random_disjoint_table, weight_table_deviation
from hisptrack.gaussian import GaussianComponent, GaussianMixture
from hisptrack.hypotheses import (
    ExtendedLaw,
    Hypothesis,
    HypothesisKind,
    ObservationPath,
    PotentialIndividual,
)
from hisptrack.models import (
    BirthModel,
    ClutterModel,
    ModelSet,
    ObservationModel,
    SensorGrid,
    constant_velocity_model,
    make_scan,
)

NEG_INF = -math.inf


def make_models(p_detect=0.5, p_fa=1.34e-3, birth_intensity=1e-6, per_cell=True):
    return ModelSet(
        motion=constant_velocity_model(4.0, 1e-6),
        grid=SensorGrid(r_min=50.0, r_max=500.0, cell_dr=15.0,
                        cell_dtheta=math.pi / 180.0),
        observation=ObservationModel(sigma_r=6.2, sigma_theta=4.5e-3,
                                     p_detect=p_detect),
        birth=BirthModel(intensity=birth_intensity, sigma_v=1.5, per_cell=per_cell),
        clutter=ClutterModel(p_false_alarm=p_fa),
    )


def make_hypothesis(uid, mean, alive=1.0, p_gone=0.0, cov_scale=20.0):
    comp = GaussianComponent(alive, np.asarray(mean, float),
                             np.diag([cov_scale, cov_scale, 1.0, 1.0]))
    law = ExtendedLaw(p_never=1.0 - alive - p_gone, p_gone=p_gone,
                      alive=GaussianMixture((comp,)))
    ind = PotentialIndividual(birth_step=0, path=ObservationPath(0, ((0, uid),)),
                              kind=HypothesisKind.PROPAGATED)
    return Hypothesis(uid=uid, individual=ind, law=law)


def random_table(rng, n, m, density=0.6):
    log_assoc = np.full((n, m), NEG_INF)
    for i in range(n):
        for j in range(m):
            if rng.random() < density:
                log_assoc[i, j] = math.log(rng.uniform(0.05, 5.0))
    beta = rng.uniform(1e-5, 1e-3, m)
    ell = rng.uniform(0.1, 5.0, m)
    p_fa = rng.uniform(1e-4, 1e-2, m)
    return AssociationTable(
        log_assoc=log_assoc,
        log_miss=np.log(rng.uniform(0.05, 1.0, n)),
        log_birth=np.log(beta * ell) if m else np.empty(0),
        log_birth_miss=np.log1p(-beta) if m else np.empty(0),
        log_clutter=np.log(p_fa) if m else np.empty(0),
        log_clutter_miss=np.log1p(-p_fa) if m else np.empty(0),
    )


# ---------------------------------------------------------------------------
# Table construction


def test_build_table_undetectable_when_pd_zero():
    models = make_models(p_detect=0.0)
    hyp = make_hypothesis(0, [200.0, 0.0, 0.0, 0.0])
    scan = make_scan(0, np.array([[200.0, 0.0]]), models.grid)
    table = build_table([hyp], scan, models, gate=25.0)
    assert table.log_assoc[0, 0] == NEG_INF
    assert table.log_miss[0] == pytest.approx(0.0)  # log 1


def test_build_table_never_existed_row():
    models = make_models()
    law = ExtendedLaw(p_never=1.0, p_gone=0.0, alive=GaussianMixture())
    ind = PotentialIndividual(0, ObservationPath(0, ((0, 0),)))
    hyp = Hypothesis(uid=0, individual=ind, law=law)
    scan = make_scan(0, np.array([[200.0, 0.0]]), models.grid)
    table = build_table([hyp], scan, models, gate=25.0)
    assert table.log_miss[0] == pytest.approx(0.0)
    assert table.log_assoc[0, 0] == NEG_INF


def test_build_table_matches_gaussian_marginal():
    models = make_models(p_detect=0.7)
    mean = np.array([250.0, 40.0, 1.0, -0.5])
    hyp = make_hypothesis(0, mean, alive=0.8)
    z = models.observation.h(mean) + np.array([3.0, 0.002])
    scan = make_scan(0, np.array(
        [z, [450.0, -2.0]]), models.grid)  # second obs far outside the gate
    table = build_table([hyp], scan, models, gate=25.0)

    comp = hyp.law.alive.components[0]
    H = models.observation.jacobian(comp.mean)
    S = H @ comp.cov @ H.T + models.observation.noise_cov
    diff = z - models.observation.h(comp.mean)
    density = math.exp(-0.5 * diff @ np.linalg.solve(S, diff)) / (
        2 * math.pi * math.sqrt(np.linalg.det(S)))
    assert table.log_assoc[0, 0] == pytest.approx(
        math.log(0.7 * 0.8 * density), rel=1e-10)
    assert table.log_assoc[0, 1] == NEG_INF  # gated out: exactly zero
    assert math.exp(table.log_miss[0]) == pytest.approx(0.3 * 0.8 + 0.2, rel=1e-12)
    # conditional law is the EKF posterior with unit mass
    mix = table.posterior_mixtures[(0, 0)]
    assert mix.total_weight == pytest.approx(1.0, rel=1e-12)


def test_build_table_clutter_uses_density_convention():
    models = make_models(p_fa=1.34e-3)
    scan = make_scan(0, np.array([[200.0, 0.5]]), models.grid)
    table = build_table([], scan, models, gate=25.0)
    grid = models.grid
    assert math.exp(table.log_clutter[0]) == pytest.approx(
        1.34e-3 / (grid.cell_dr * grid.cell_dtheta), rel=1e-12)
    assert math.exp(table.log_clutter_miss[0]) == pytest.approx(1 - 1.34e-3, rel=1e-12)


# ---------------------------------------------------------------------------
# Per-observation normalisers


def test_compute_cz_direct_arithmetic():
    beta = 7.2e-5
    p_fa = 1.34e-3
    table = AssociationTable(
        log_assoc=np.empty((0, 1)),
        log_miss=np.empty(0),
        log_birth=np.array([math.log(beta * 1.0)]),   # unit in-cell likelihood
        log_birth_miss=np.array([math.log1p(-beta)]),
        log_clutter=np.array([math.log(p_fa)]),
        log_clutter_miss=np.array([math.log1p(-p_fa)]),
    )
    expected = beta / (1 - beta) + p_fa / (1 - p_fa)
    assert compute_cz(table, 0) == pytest.approx(expected, rel=1e-12)


def test_compute_cz_zero_when_no_birth_or_clutter():
    table = AssociationTable(
        log_assoc=np.empty((0, 1)),
        log_miss=np.empty(0),
        log_birth=np.array([NEG_INF]),
        log_birth_miss=np.array([0.0]),
        log_clutter=np.array([NEG_INF]),
        log_clutter_miss=np.array([0.0]),
    )
    assert compute_cz(table, 0) == 0.0


def test_compute_cz_monotone_in_false_alarm_probability():
    values = []
    for p_fa in (1e-4, 1e-3, 1e-2, 1e-1):
        table = AssociationTable(
            log_assoc=np.empty((0, 1)),
            log_miss=np.empty(0),
            log_birth=np.array([math.log(7.2e-5)]),
            log_birth_miss=np.array([math.log1p(-7.2e-5)]),
            log_clutter=np.array([math.log(p_fa)]),
            log_clutter_miss=np.array([math.log1p(-p_fa)]),
        )
        values.append(compute_cz(table, 0))
    assert all(a < b for a, b in zip(values, values[1:]))


def test_compute_cz_rejects_saturated_birth():
    table = AssociationTable(
        log_assoc=np.empty((0, 1)),
        log_miss=np.empty(0),
        log_birth=np.array([0.0]),
        log_birth_miss=np.array([NEG_INF]),  # birth probability of one
        log_clutter=np.array([math.log(1e-3)]),
        log_clutter_miss=np.array([math.log1p(-1e-3)]),
    )
    with pytest.raises(ValueError):
        compute_cz(table, 0)


# ---------------------------------------------------------------------------
# Weights: factored vs exact


def test_empty_scan_weights_are_leave_one_out_miss_products():
    rng = np.random.default_rng(0)
    miss = rng.uniform(0.1, 1.0, 4)
    table = AssociationTable(
        log_assoc=np.empty((4, 0)),
        log_miss=np.log(miss),
        log_birth=np.empty(0), log_birth_miss=np.empty(0),
        log_clutter=np.empty(0), log_clutter_miss=np.empty(0),
    )
    wt = compute_weights_factored(table)
    for i in range(4):
        expected = np.prod(np.delete(miss, i))
        assert math.exp(wt.log_w_miss[i]) == pytest.approx(expected, rel=1e-12)
    assert math.exp(wt.log_joint) == pytest.approx(np.prod(miss), rel=1e-12)


def test_no_hypotheses_birth_weight_is_other_miss_times_other_columns():
    rng = np.random.default_rng(1)
    table = random_table(rng, 0, 2)
    wt = compute_weights_factored(table)
    cz = [compute_cz(table, j) for j in range(2)]
    for j in range(2):
        other = 1 - j
        expected = (math.exp(table.log_clutter_miss[j])
                    * math.exp(table.log_birth_miss[other])
                    * math.exp(table.log_clutter_miss[other]) * cz[other])
        assert math.exp(wt.log_w_birth[j]) == pytest.approx(expected, rel=1e-12)


def test_factored_equals_exact_on_disjoint_instances():
    rng = np.random.default_rng(2)
    for _ in range(40):
        table = random_disjoint_table(rng)
        assert weight_table_deviation(table) <= 1e-10


def test_two_hypotheses_disjoint_gates_match_exact():
    table = AssociationTable(
        log_assoc=np.array([[math.log(2.0), NEG_INF],
                            [NEG_INF, math.log(0.7)]]),
        log_miss=np.log(np.array([0.4, 0.6])),
        log_birth=np.log(np.array([1e-4, 2e-4])),
        log_birth_miss=np.log1p(-np.array([1e-4, 2e-4])),
        log_clutter=np.log(np.array([2e-3, 1e-3])),
        log_clutter_miss=np.log1p(-np.array([2e-3, 1e-3])),
    )
    exact = compute_weights_exact(table)
    fact = compute_weights_factored(table)
    for i in range(2):
        for j in range(2):
            if np.isfinite(table.log_assoc[i, j]):
                assert fact.log_w[i, j] == pytest.approx(exact.log_w[i, j], abs=1e-12)
        assert fact.log_w_miss[i] == pytest.approx(exact.log_w_miss[i], abs=1e-12)
    assert fact.log_joint == pytest.approx(exact.log_joint, abs=1e-12)


def test_joint_probability_enumeration_matches_factorised_matching_sum():
    rng = np.random.default_rng(3)
    for _ in range(25):
        table = random_table(rng, int(rng.integers(0, 5)), int(rng.integers(0, 5)))
        dense = compute_weights_exact(table)
        sparse = compute_weights_exact_sparse(table)
        assert abs(math.expm1(dense.log_joint - sparse.log_joint)) < 1e-12


def test_exact_sparse_matches_dense_everywhere():
    rng = np.random.default_rng(4)
    for _ in range(25):
        table = random_table(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        dense = compute_weights_exact(table)
        sparse = compute_weights_exact_sparse(table)
        gated = np.isfinite(table.log_assoc)
        assert np.allclose(sparse.log_w[gated], dense.log_w[gated], atol=1e-10)
        assert np.allclose(sparse.log_w_miss, dense.log_w_miss, atol=1e-10)
        assert np.allclose(sparse.log_w_birth, dense.log_w_birth, atol=1e-10)
        assert np.allclose(sparse.log_w_clutter, dense.log_w_clutter, atol=1e-10)
        assert np.allclose(sparse.log_w_birth_miss, dense.log_w_birth_miss, atol=1e-10)
        assert np.allclose(sparse.log_w_clutter_miss, dense.log_w_clutter_miss,
                           atol=1e-10)


def test_exact_refuses_large_instances():
    table = random_table(np.random.default_rng(5), 11, 3)
    with pytest.raises(ValueError):
        compute_weights_exact(table)


def test_leave_one_out_identity():
    rng = np.random.default_rng(6)
    table = random_table(rng, 30, 8, density=0.3)
    wt = compute_weights_factored(table)
    gated = np.argwhere(np.isfinite(table.log_assoc))
    assert len(gated)
    for i, j in gated[:40]:
        direct = float(np.sum(np.delete(wt.log_T[:, j], i)))
        quotient = wt.log_P[j] - wt.log_T[i, j]
        assert abs(math.expm1(quotient - direct)) < 1e-12


def test_exact_zero_pairing_recomputed_directly():
    # Row 0 must take observation 0: its miss mass and all other pairings are
    # zero, so T(0, z0) = 0 and P(z0) = 0; the weights of other rows at z0
    # vanish while row 0's uses the directly recomputed leave-one-out product.
    table = AssociationTable(
        log_assoc=np.array([[math.log(2.0), NEG_INF],
                            [math.log(0.5), math.log(0.8)]]),
        log_miss=np.array([NEG_INF, math.log(0.6)]),
        log_birth=np.log(np.array([1e-4, 1e-4])),
        log_birth_miss=np.log1p(-np.array([1e-4, 1e-4])),
        log_clutter=np.log(np.array([1e-3, 1e-3])),
        log_clutter_miss=np.log1p(-np.array([1e-3, 1e-3])),
    )
    fact = compute_weights_factored(table)
    exact = compute_weights_exact(table)
    assert fact.log_w[1, 0] == NEG_INF
    assert exact.log_w[1, 0] == NEG_INF
    assert np.isfinite(fact.log_w[0, 0])
    assert fact.log_w[0, 0] == pytest.approx(exact.log_w[0, 0], abs=1e-12)


def test_approximation_error_shrinks_with_cross_mass():
    rng = np.random.default_rng(7)

    def instance(eps):
        n = m = 3
        log_assoc = np.full((n, m), math.log(eps))
        for k in range(n):
            log_assoc[k, k] = math.log(rng.uniform(0.5, 2.0))
        beta = rng.uniform(1e-5, 1e-4, m)
        p_fa = rng.uniform(1e-3, 5e-3, m)
        return AssociationTable(
            log_assoc=log_assoc,
            log_miss=np.log(rng.uniform(0.3, 1.0, n)),
            log_birth=np.log(beta), log_birth_miss=np.log1p(-beta),
            log_clutter=np.log(p_fa), log_clutter_miss=np.log1p(-p_fa),
        )

    def deviation(eps):
        errs = []
        for _ in range(15):
            table = instance(eps)
            exact = compute_weights_exact(table)
            fact = compute_weights_factored(table)
            errs.append(np.max(np.abs(np.expm1(fact.log_w - exact.log_w))))
        return float(np.mean(errs))

    d2, d4, d8 = deviation(1e-2), deviation(1e-4), deviation(1e-8)
    assert d2 > d4 > d8
    assert d8 < 1e-3


def test_per_observation_joint_form():
    rng = np.random.default_rng(8)
    # diagonal tables: every hypothesis gated to exactly one distinct column
    for _ in range(10):
        n = m = int(rng.integers(1, 5))
        log_assoc = np.full((n, m), NEG_INF)
        for k in range(n):
            log_assoc[k, k] = math.log(rng.uniform(0.1, 3.0))
        table = random_table(rng, n, m, density=0.0)
        table = AssociationTable(
            log_assoc=log_assoc, log_miss=table.log_miss,
            log_birth=table.log_birth, log_birth_miss=table.log_birth_miss,
            log_clutter=table.log_clutter, log_clutter_miss=table.log_clutter_miss)
        exact = compute_weights_exact(table)
        alt = log_joint_per_observation_form(table)
        assert abs(math.expm1(alt - exact.log_joint)) < 1e-12


def test_per_observation_form_empty_scan():
    rng = np.random.default_rng(9)
    table = random_table(rng, 3, 0)
    expected = float(np.sum(table.log_miss))
    assert log_joint_per_observation_form(table) == pytest.approx(expected, abs=1e-12)


def test_per_observation_form_refuses_zero_miss():
    table = AssociationTable(
        log_assoc=np.array([[0.0]]),
        log_miss=np.array([NEG_INF]),
        log_birth=np.array([math.log(1e-4)]),
        log_birth_miss=np.array([math.log1p(-1e-4)]),
        log_clutter=np.array([math.log(1e-3)]),
        log_clutter_miss=np.array([math.log1p(-1e-3)]),
    )
    with pytest.raises(ValueError):
        log_joint_per_observation_form(table)


def test_factored_rejects_zero_column_mass():
    table = AssociationTable(
        log_assoc=np.array([[0.0]]),
        log_miss=np.array([math.log(0.5)]),
        log_birth=np.array([NEG_INF]),
        log_birth_miss=np.array([0.0]),
        log_clutter=np.array([NEG_INF]),
        log_clutter_miss=np.array([0.0]),
    )
    with pytest.raises(ValueError):
        compute_weights_factored(table)


def test_dump_table_format():
    rng = np.random.default_rng(10)
    table = random_table(rng, 2, 2, density=1.0)
    wt = compute_weights_factored(table)
    out = io.StringIO()
    dump_table(table, out, weights=wt)
    lines = out.getvalue().splitlines()
    assert lines[0] == "row\tcolumn\tlog_mass\tlog_weight"
    assert any(line.startswith("hyp0\tmiss") for line in lines)
    assert any(line.startswith("birth1\tz1") for line in lines)
    assert any(line.startswith("clutter0\tz0") for line in lines)
    # every data row carries the advertised column count
    assert all(len(line.split("\t")) == 4 for line in lines[1:])
