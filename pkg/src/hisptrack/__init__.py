"""Multi-object tracking with per-hypothesis existence laws.

A hypothesis-level multi-object filter with Gaussian-mixture laws and
linear-complexity data association, an exact association-enumeration oracle,
a GM intensity-filter baseline, OSPA scoring, and a range-bearing Monte Carlo
benchmark harness.
"""

from .association import (
    AssociationTable,
    WeightTable,
    build_table,
    compute_cz,
    compute_weights_exact,
    compute_weights_exact_sparse,
    compute_weights_factored,
    dump_table,
    log_joint_per_observation_form,
)
from .gaussian import (
    GaussianComponent,
    GaussianMixture,
    ekf_update,
    gaussian_eval,
    kalman_predict,
    merge,
    prune,
)
from .hisp import (
    FilterState,
    HispConfig,
    HispFilter,
    extract_estimates,
    observation_update,
    reduce_hypotheses,
    time_update,
)
from .hypotheses import (
    ExtendedLaw,
    Hypothesis,
    HypothesisKind,
    ObservationPath,
    PotentialIndividual,
    alive_probability,
    existence_probability,
    update_confirmation,
)
from .metrics import OspaParams, OspaResult, optimal_assignment, ospa
from .models import (
    BirthModel,
    ClutterModel,
    ModelSet,
    MotionModel,
    ObservationModel,
    Scan,
    SensorGrid,
    constant_velocity_model,
    make_scan,
)
from .phd import PhdConfig, PhdFilter, phd_extract, phd_predict, phd_update
from .simulation import (
    Scenario,
    case_scenario,
    generate_truth,
    load_scenario,
    run_case,
    run_scenario,
    scenario_models,
    simulate_scan,
)

__version__ = "0.1.0"
