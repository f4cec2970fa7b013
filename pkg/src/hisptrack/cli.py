"""Command-line entry point: run benchmark cases, verify the association engine."""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .association import (
    AssociationTable,
    compute_weights_exact,
    compute_weights_factored,
    _lse,
)
from .hisp import HispConfig, HispFilter
from .metrics import OspaParams
from .phd import PhdConfig
from .simulation import (
    case_scenario,
    load_scenario,
    run_scenario,
    scenario_models,
    write_ospa_csv,
    write_summary_csv,
)

__all__ = ["main", "run_verification", "random_disjoint_table", "VerificationResult"]

NEG_INF = -math.inf


# ---------------------------------------------------------------------------
# Synthetic association instances for the verification suites


def random_disjoint_table(rng: np.random.Generator, max_rows: int = 4,
                          max_cols: int = 4) -> AssociationTable:
    """Random small table whose gates form a partial matching.

    Every hypothesis row can pair with at most one observation and vice
    versa, so all the cross products the factorised engine neglects are
    exactly zero and it must agree with exact enumeration.
    """
    n = int(rng.integers(0, max_rows + 1))
    m = int(rng.integers(0, max_cols + 1))
    log_assoc = np.full((n, m), NEG_INF)
    k = int(rng.integers(0, min(n, m) + 1))
    rows = rng.choice(n, size=k, replace=False) if k else []
    cols = rng.choice(m, size=k, replace=False) if k else []
    for i, j in zip(rows, cols):
        log_assoc[int(i), int(j)] = math.log(rng.uniform(0.05, 5.0))
    log_miss = np.log(rng.uniform(0.05, 1.0, size=n))
    beta = rng.uniform(1e-5, 1e-3, size=m)
    ell = rng.uniform(0.1, 5.0, size=m)
    p_fa = rng.uniform(1e-4, 1e-2, size=m)
    return AssociationTable(
        log_assoc=log_assoc,
        log_miss=log_miss,
        log_birth=np.log(beta * ell) if m else np.empty(0),
        log_birth_miss=np.log1p(-beta) if m else np.empty(0),
        log_clutter=np.log(p_fa) if m else np.empty(0),
        log_clutter_miss=np.log1p(-p_fa) if m else np.empty(0),
    )


def _relative_errors(wa: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """Relative deviation of two log-domain arrays, exact zeros comparing equal."""
    both = np.isfinite(wa) & np.isfinite(wb)
    with np.errstate(invalid="ignore"):
        diff = np.where(both, np.asarray(wa) - np.asarray(wb), 0.0)
    out = np.where(both, np.abs(np.expm1(diff)), 0.0)
    mismatch = np.isfinite(wa) ^ np.isfinite(wb)
    return np.where(mismatch, np.inf, out)


def weight_table_deviation(table: AssociationTable, perturb: float = 0.0) -> float:
    """Max relative deviation between factored and exact weights/posteriors."""
    exact = compute_weights_exact(table)
    fact = compute_weights_factored(table)
    log_w = fact.log_w + perturb
    errs = [
        _relative_errors(log_w, exact.log_w)[np.isfinite(table.log_assoc)],
        _relative_errors(fact.log_w_miss, exact.log_w_miss),
        _relative_errors(fact.log_w_birth, exact.log_w_birth),
        _relative_errors(fact.log_w_clutter, exact.log_w_clutter),
        np.array([_relative_errors(fact.log_joint, exact.log_joint)]),
    ]
    n, m = table.shape
    post_errs: List[float] = []
    # Posterior masses per column and per row under both weight sets.
    for j in range(m):
        num_f = np.concatenate((log_w[:, j] + table.log_assoc[:, j],
                                [fact.log_w_birth[j] + table.log_birth[j],
                                 fact.log_w_clutter[j] + table.log_clutter[j]]))
        num_e = np.concatenate((exact.log_w[:, j] + table.log_assoc[:, j],
                                [exact.log_w_birth[j] + table.log_birth[j],
                                 exact.log_w_clutter[j] + table.log_clutter[j]]))
        den_f, den_e = _lse(num_f), _lse(num_e)
        post_errs.extend(_relative_errors(num_f - den_f, num_e - den_e)[
            np.isfinite(num_e)].tolist())
    for i in range(n):
        num_f = np.concatenate((log_w[i] + table.log_assoc[i],
                                [fact.log_w_miss[i] + table.log_miss[i]]))
        num_e = np.concatenate((exact.log_w[i] + table.log_assoc[i],
                                [exact.log_w_miss[i] + table.log_miss[i]]))
        den_f, den_e = _lse(num_f), _lse(num_e)
        post_errs.extend(_relative_errors(num_f - den_f, num_e - den_e)[
            np.isfinite(num_e)].tolist())
    flat = np.concatenate([e.ravel() for e in errs] + [np.array(post_errs)])
    return float(np.max(flat)) if flat.size else 0.0


def joint_consistency_error(table: AssociationTable) -> float:
    """Max relative departure of row/column sums from the joint probability."""
    wt = compute_weights_exact(table)
    n, m = table.shape
    errs = [0.0]
    for j in range(m):
        total = _lse(np.concatenate((
            wt.log_w[:, j] + table.log_assoc[:, j],
            [wt.log_w_birth[j] + table.log_birth[j],
             wt.log_w_clutter[j] + table.log_clutter[j]])))
        errs.append(abs(math.expm1(total - wt.log_joint)))
    for i in range(n):
        total = _lse(np.concatenate((
            wt.log_w[i] + table.log_assoc[i],
            [wt.log_w_miss[i] + table.log_miss[i]])))
        errs.append(abs(math.expm1(total - wt.log_joint)))
    for j in range(m):
        total_b = _lse([wt.log_w_birth[j] + table.log_birth[j],
                        wt.log_w_birth_miss[j] + table.log_birth_miss[j]])
        total_c = _lse([wt.log_w_clutter[j] + table.log_clutter[j],
                        wt.log_w_clutter_miss[j] + table.log_clutter_miss[j]])
        errs.append(abs(math.expm1(total_b - wt.log_joint)))
        errs.append(abs(math.expm1(total_c - wt.log_joint)))
    return max(errs)


@dataclass(frozen=True)
class VerificationResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_verification(seed: int = 0, n_instances: int = 50,
                     perturb: float = 0.0) -> List[VerificationResult]:
    """Run the oracle suites; `perturb` injects a weight fault for self-tests."""
    rng = np.random.default_rng(seed)
    tables = [random_disjoint_table(rng) for _ in range(n_instances)]

    oracle_err = max(weight_table_deviation(t, perturb) for t in tables)
    consistency_err = max(joint_consistency_error(t) for t in tables)

    scenario = replace(
        case_scenario(1), name="verify",
        initial_states=case_scenario(1).initial_states[:1], duration=40.0)
    models = scenario_models(scenario)
    tracker = HispFilter(models, HispConfig(weights_mode="exact"))
    from .simulation import generate_truth, simulate_scan
    rng_run = np.random.default_rng([seed, 999])
    truth = generate_truth(scenario, rng_run)
    norm_err = 0.0
    for k in range(scenario.n_steps):
        scan = simulate_scan(truth[k + 1], models, rng_run, step=k)
        diag = tracker.step(scan)
        norm_err = max(norm_err, diag.column_identity_error or 0.0,
                       diag.row_identity_error or 0.0)

    return [
        VerificationResult("factored-vs-exact weights and posteriors",
                           oracle_err, 1e-10),
        VerificationResult("joint-probability row/column consistency",
                           consistency_err, 1e-10),
        VerificationResult("update normalisation (exact weights, live run)",
                           norm_err, 1e-10),
    ]


# ---------------------------------------------------------------------------
# Commands


def _cmd_run(args) -> int:
    if (args.case is None) == (args.scenario is None):
        print("error: provide exactly one of --case or --scenario", file=sys.stderr)
        return 2
    try:
        scenario = (case_scenario(args.case) if args.case is not None
                    else load_scenario(args.scenario))
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    filters = ("hisp", "phd") if args.filter == "both" else (args.filter,)
    hisp_config = HispConfig(
        prune_threshold=args.tau, merge_distance=args.dm,
        confirm_threshold=args.tau_c, keep_confirmed_threshold=args.tau_uc,
        gate=args.gate)
    phd_config = PhdConfig(prune_threshold=args.tau, merge_distance=args.dm,
                           gate=args.gate)
    ospa_params = OspaParams(cutoff=args.ospa_c, order=args.ospa_p)

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 1

    results = run_scenario(scenario, n_runs=args.runs, seed=args.seed,
                           filters=filters, ospa_params=ospa_params,
                           hisp_config=hisp_config, phd_config=phd_config)
    ospa_path = out_dir / f"ospa_{scenario.name}.csv"
    summary_path = out_dir / f"summary_{scenario.name}.csv"
    write_ospa_csv(results, scenario.name, ospa_path)
    write_summary_csv(results, scenario.name, summary_path)
    for name in filters:
        print(f"{scenario.name} {name}: time-averaged OSPA "
              f"{results.time_averaged(name):.4f}")
    print(f"wrote {ospa_path} and {summary_path}")
    return 0


def _cmd_verify(args) -> int:
    results = run_verification(seed=args.seed, n_instances=args.instances,
                               perturb=args.perturb)
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed = failed or not r.passed
        print(f"{status}  {r.name:<{width}}  max_err={r.max_error:.3e}  "
              f"tol={r.tolerance:.1e}")
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hisptrack",
        description="Multi-object tracking benchmark: hypothesis filter vs "
                    "intensity filter on a range-bearing scenario.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a benchmark case or scenario file")
    run_p.add_argument("--case", type=int, choices=(1, 2, 3))
    run_p.add_argument("--scenario", type=str, help="path to a scenario JSON file")
    run_p.add_argument("--runs", type=int, default=50)
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--filter", choices=("hisp", "phd", "both"), default="both")
    run_p.add_argument("--out", default=os.environ.get("HISPTRACK_OUT", "."))
    run_p.add_argument("--ospa-c", type=float, default=100.0)
    run_p.add_argument("--ospa-p", type=float, default=1.0)
    run_p.add_argument("--tau", type=float, default=1e-5,
                       help="hypothesis/component prune threshold")
    run_p.add_argument("--dm", type=float, default=4.0,
                       help="squared-Mahalanobis merge distance")
    run_p.add_argument("--tau-c", type=float, default=0.99,
                       help="confirmation threshold")
    run_p.add_argument("--tau-uc", type=float, default=0.9,
                       help="keep-confirmed threshold")
    run_p.add_argument("--gate", type=float, default=25.0,
                       help="squared-Mahalanobis association gate")
    run_p.set_defaults(func=_cmd_run)

    verify_p = sub.add_parser("verify", help="run the association oracle suites")
    verify_p.add_argument("--seed", type=int, default=0)
    verify_p.add_argument("--instances", type=int, default=50)
    verify_p.add_argument("--perturb", type=float, default=0.0,
                          help="inject a log-weight fault (self-test)")
    verify_p.set_defaults(func=_cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
