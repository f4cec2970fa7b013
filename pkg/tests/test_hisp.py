import dataclasses
import math

import numpy as np
import pytest

import hisptrack as ht
from hisptrack.association import build_table
from hisptrack.gaussian import GaussianComponent, GaussianMixture
from hisptrack.hisp import (
    FilterState,
    HispConfig,
    HispFilter,
    extract_estimates,
    observation_update,
    reduce_hypotheses,
    time_update,
)
from hisptrack.hypotheses import (
    ExtendedLaw,
    Hypothesis,
    HypothesisKind,
    ObservationPath,
    PotentialIndividual,
    alive_probability,
)
from hisptrack.models import make_scan

from oracles import enumerate_association_posteriors
from test_association import make_hypothesis, make_models


def state_with(hyps, step=0):
    return FilterState(step=step, hypotheses=tuple(hyps),
                       next_uid=max((h.uid for h in hyps), default=-1) + 1)


def law_masses(law):
    return law.p_never, law.p_gone, alive_probability(law)


def test_time_update_certain_survival_keeps_masses():
    models = make_models()
    hyp = make_hypothesis(0, [200.0, 50.0, 1.0, -0.5], alive=0.7)
    out = time_update(state_with([hyp], step=2), models.motion)
    assert out.step == 3
    new = out.hypotheses[0]
    assert law_masses(new.law) == pytest.approx(law_masses(hyp.law), abs=1e-14)
    # moments moved by the transition
    assert np.allclose(new.law.alive.components[0].mean[:2], [204.0, 48.0])


def test_time_update_zero_survival_moves_mass_to_gone():
    models = dataclasses.replace(make_models().motion, p_survive=0.0)
    hyp = make_hypothesis(0, [200.0, 50.0, 1.0, -0.5], alive=0.7, p_gone=0.1)
    out = time_update(state_with([hyp]), models)
    new = out.hypotheses[0]
    assert alive_probability(new.law) == 0.0
    assert new.law.p_gone == pytest.approx(0.8)
    assert new.law.p_never == pytest.approx(0.2)


def test_time_update_is_markov():
    rng = np.random.default_rng(0)
    models = dataclasses.replace(make_models().motion, p_survive=0.73)
    for _ in range(10):
        parts = rng.dirichlet(np.ones(3))
        hyp = make_hypothesis(0, rng.uniform(-200, 200, 4),
                              alive=parts[2], p_gone=parts[1])
        out = time_update(state_with([hyp]), models)
        total = sum(law_masses(out.hypotheses[0].law))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_observation_update_empty_scan():
    models = make_models(p_detect=0.5)
    hyp = make_hypothesis(0, [200.0, 50.0, 1.0, -0.5], alive=0.6)
    scan = make_scan(0, np.empty((0, 2)), models.grid)
    result = observation_update(state_with([hyp]), scan, models, HispConfig())
    assert len(result.state.hypotheses) == 1
    child = result.state.hypotheses[0]
    # single miss column: posterior mass one, law re-weighted by non-detection
    expected_alive = 0.5 * 0.6 / (0.5 * 0.6 + 0.4)
    assert alive_probability(child.law) == pytest.approx(expected_alive, rel=1e-12)
    assert child.individual.path.last is None


def test_observation_update_rejects_step_mismatch():
    models = make_models()
    scan = make_scan(3, np.empty((0, 2)), models.grid)
    with pytest.raises(ValueError):
        observation_update(FilterState(step=1), scan, models, HispConfig())


def test_lone_clutter_observation_splits_birth_vs_clutter():
    models = make_models(p_detect=0.5, p_fa=1.34e-3, birth_intensity=1e-6,
                         per_cell=False)
    # one far-away propagated hypothesis whose gate misses the observation
    hyp = make_hypothesis(0, [-300.0, -200.0, 0.5, 0.5])
    scan = make_scan(0, np.array([[275.0, 1.0]]), models.grid)
    config = HispConfig(collect_masses=True)
    result = observation_update(state_with([hyp]), scan, models, config)
    table = build_table([hyp], scan, models, config.gate)
    assert table.log_assoc[0, 0] == -math.inf
    ratio_birth = math.exp(table.log_birth[0] - table.log_birth_miss[0])
    ratio_clutter = math.exp(table.log_clutter[0] - table.log_clutter_miss[0])
    m_birth = result.masses[("birth", 0)]
    m_clutter = result.masses[("clutter", 0)]
    assert m_birth + m_clutter == pytest.approx(1.0, abs=1e-12)
    assert m_birth / m_clutter == pytest.approx(ratio_birth / ratio_clutter, rel=1e-10)


def test_detected_column_masses_sum_to_one():
    models = make_models(p_detect=0.5)
    hyps = [make_hypothesis(0, [200.0, 50.0, 1.0, -0.5], alive=0.9),
            make_hypothesis(1, [210.0, 55.0, 0.0, 0.0], alive=0.4)]
    z0 = models.observation.h(np.array([205.0, 52.0]))
    scan = make_scan(0, np.array([z0, [400.0, -2.0]]), models.grid)
    config = HispConfig(collect_masses=True)
    result = observation_update(state_with(hyps), scan, models, config)
    for j in range(2):
        total = sum(mass for key, mass in result.masses.items()
                    if key[0] in ("hyp", "birth", "clutter")
                    and key[-1] == j and (key[0] != "hyp" or key[2] == j))
        assert total == pytest.approx(1.0, abs=1e-10)


def test_one_step_posterior_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    models = make_models(p_detect=0.6, p_fa=2e-3, birth_intensity=1e-6,
                         per_cell=False)
    for trial in range(6):
        centers = rng.uniform(-1, 1, size=(3, 2)) * 30 + np.array([150.0, 100.0])
        hyps = [make_hypothesis(i, [c[0], c[1], 0.5, -0.5],
                                alive=float(rng.uniform(0.2, 0.95)))
                for i, c in enumerate(centers[:int(rng.integers(1, 4))])]
        n_obs = int(rng.integers(1, 4))
        zs = [models.observation.h(np.append(centers[min(k, len(centers) - 1)]
                                             + rng.uniform(-8, 8, 2), [0, 0]))
              for k in range(n_obs)]
        scan = make_scan(0, np.array(zs), models.grid)
        config = HispConfig(weights_mode="exact", collect_masses=True)
        result = observation_update(state_with(hyps), scan, models, config)
        table = build_table(hyps, scan, models, config.gate)
        oracle_masses, log_joint = enumerate_association_posteriors(table)
        assert abs(math.expm1(result.log_joint - log_joint)) < 1e-10
        for key, mass in result.masses.items():
            assert mass == pytest.approx(oracle_masses.get(key, 0.0), abs=1e-10), key


def test_exact_update_identities_hold():
    models = make_models(p_detect=0.6, p_fa=2e-3)
    hyps = [make_hypothesis(0, [150.0, 100.0, 0.5, -0.5], alive=0.8),
            make_hypothesis(1, [-120.0, 180.0, 0.0, 0.0], alive=0.5)]
    z = [models.observation.h(np.array([152.0, 101.0, 0, 0])),
         models.observation.h(np.array([-121.0, 178.0, 0, 0])),
         np.array([420.0, -2.0])]
    scan = make_scan(0, np.array(z), models.grid)
    result = observation_update(state_with(hyps), scan, models,
                                HispConfig(weights_mode="exact"))
    assert result.column_identity_error < 1e-10
    assert result.row_identity_error < 1e-10


def test_reduce_merges_and_caps_probability():
    config = HispConfig()
    a = make_hypothesis(0, [100.0, 100.0, 1.0, 0.0], alive=0.7, cov_scale=4.0)
    b = make_hypothesis(1, [101.0, 100.5, 1.0, 0.0], alive=0.6, cov_scale=4.0)
    out = reduce_hypotheses(state_with([a, b]), config)
    assert len(out.hypotheses) == 1
    assert alive_probability(out.hypotheses[0].law) == pytest.approx(1.0)


def test_reduce_deletes_negligible_hypotheses():
    config = HispConfig()
    a = make_hypothesis(0, [100.0, 100.0, 1.0, 0.0], alive=0.5)
    weak = make_hypothesis(1, [-200.0, 0.0, 0.0, 0.0], alive=1e-6)
    out = reduce_hypotheses(state_with([a, weak]), config)
    assert [h.uid for h in out.hypotheses] == [0]


def test_reduce_keeps_disjoint_hypotheses():
    config = HispConfig()
    hyps = [make_hypothesis(i, [100.0 * i - 200, 50.0 * i, 0.5, 0.5], alive=0.5)
            for i in range(4)]
    out = reduce_hypotheses(state_with(hyps), config)
    assert len(out.hypotheses) == 4


def test_reduce_applies_confirmation_hysteresis():
    config = HispConfig()
    fresh = make_hypothesis(0, [100.0, 100.0, 1.0, 0.0], alive=0.995)
    out = reduce_hypotheses(state_with([fresh]), config)
    assert out.hypotheses[0].confirmed
    held = dataclasses.replace(
        make_hypothesis(1, [-100.0, 100.0, 1.0, 0.0], alive=0.92), confirmed=True)
    out = reduce_hypotheses(state_with([held]), config)
    assert out.hypotheses[0].confirmed
    dropped = dataclasses.replace(
        make_hypothesis(2, [-100.0, -100.0, 1.0, 0.0], alive=0.85), confirmed=True)
    out = reduce_hypotheses(state_with([dropped]), config)
    assert not out.hypotheses[0].confirmed


def test_reduce_enforces_hypothesis_cap():
    config = HispConfig(max_hypotheses=3)
    hyps = [make_hypothesis(i, [100.0 * i - 400, 60.0 * i - 150, 0.0, 0.0],
                            alive=0.1 * (i + 1))
            for i in range(6)]
    out = reduce_hypotheses(state_with(hyps), config)
    assert len(out.hypotheses) == 3
    kept = sorted(alive_probability(h.law) for h in out.hypotheses)
    assert kept == pytest.approx([0.4, 0.5, 0.6])


def test_extract_only_confirmed():
    none_confirmed = state_with([make_hypothesis(0, [1.0, 2.0, 0, 0], alive=0.5)])
    assert extract_estimates(none_confirmed) == []
    hyps = [dataclasses.replace(
        make_hypothesis(i, [50.0 * i + 60, -30.0 * i, 1.0, 2.0], alive=0.999),
        confirmed=True) for i in range(5)]
    estimates = extract_estimates(state_with(hyps))
    assert len(estimates) == 5
    means, uids = zip(*estimates)
    assert sorted(uids) == list(range(5))
    assert np.allclose(means[0], [60.0, 0.0, 1.0, 2.0])


def test_full_recursion_laws_stay_normalised():
    sc = dataclasses.replace(ht.case_scenario(1),
                             initial_states=ht.case_scenario(1).initial_states[:2],
                             duration=48.0, name="mini")
    models = ht.scenario_models(sc)
    rng = np.random.default_rng(3)
    truth = ht.generate_truth(sc, rng)
    tracker = HispFilter(models)
    for k in range(sc.n_steps):
        scan = ht.simulate_scan(truth[k + 1], models, rng, step=k)
        tracker.step(scan)
        for hyp in tracker.state.hypotheses:
            total = hyp.law.p_never + hyp.law.p_gone + alive_probability(hyp.law)
            assert total == pytest.approx(1.0, abs=1e-9)
