"""Post-hoc security screening against sampled discrete contingencies.

A scenario is a set of devices failed outright (outage fraction 1).  The
operator may redispatch within ramp and tie bands, so feasibility is judged
by the contingency solve's infeasibility slack: a scenario passes when the
solve converges with the slack below tolerance.  Solver failures are recorded
separately and count as violations in the aggregates.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NkScopfError, SingularSystemError
from .grid_model import AttackVector, PowerSystem
from .ipm import SolverOptions
from .powerflow import Dispatch, NetworkState, solve_power_flow
from .third_stage import solve_third_stage

__all__ = [
    "ContingencyScenario",
    "ScenarioOutcome",
    "ViolationReport",
    "sample_contingencies",
    "check_feasibility",
    "evaluate_dispatch",
]

FEASIBILITY_TOL = 1e-4  # p.u. slack magnitude treated as a violation


@dataclass(frozen=True)
class ContingencyScenario:
    """Distinct outage-device indices failed simultaneously."""

    devices: tuple

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(sorted(int(d) for d in self.devices)))
        if len(set(self.devices)) != len(self.devices):
            raise ValueError("scenario devices must be distinct")

    @property
    def size(self) -> int:
        return len(self.devices)

    def attack(self, sys: PowerSystem) -> AttackVector:
        y = np.zeros(sys.n_outage)
        for d in self.devices:
            if not 0 <= d < sys.n_outage:
                raise ValueError(f"device index {d} out of range")
            y[d] = 1.0
        return AttackVector(y, max(self.size, 1))

    def label(self, sys: PowerSystem) -> str:
        return " + ".join(sys.outage_devices[d].label(sys) for d in self.devices)


@dataclass
class ScenarioOutcome:
    scenario: ContingencyScenario
    status: str              # feasible | infeasible | solver_failure
    slack_inf: float | None  # max slack magnitude when the solve converged
    detail: str = ""

    @property
    def violation(self) -> bool:
        return self.status != "feasible"


@dataclass
class ViolationReport:
    outcomes: list
    tol: float
    seed: int | None
    scenario_digest: str
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts:
            counts = {}
            for out in self.outcomes:
                row = counts.setdefault(out.scenario.size, {
                    "tested": 0, "feasible": 0, "infeasible": 0,
                    "solver_failure": 0, "violations": 0,
                })
                row["tested"] += 1
                row[out.status] += 1
                if out.violation:
                    row["violations"] += 1
            self.counts = dict(sorted(counts.items()))

    @property
    def total_violations(self) -> int:
        return sum(row["violations"] for row in self.counts.values())

    def to_json_dict(self) -> dict:
        return {
            "tolerance": self.tol,
            "seed": self.seed,
            "scenario_digest": self.scenario_digest,
            "aggregates": {str(k): v for k, v in self.counts.items()},
            "scenarios": [
                {
                    "devices": list(out.scenario.devices),
                    "status": out.status,
                    "slack_inf": out.slack_inf,
                    "detail": out.detail,
                }
                for out in self.outcomes
            ],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario_size", "tested", "feasible",
                             "infeasible", "solver_failure", "violations"])
            for size, row in self.counts.items():
                writer.writerow([size, row["tested"], row["feasible"],
                                 row["infeasible"], row["solver_failure"],
                                 row["violations"]])


def scenario_digest(scenarios) -> str:
    blob = json.dumps([list(s.devices) for s in scenarios]).encode()
    return hashlib.sha256(blob).hexdigest()


def sample_contingencies(sys: PowerSystem, size: int, count: int,
                         seed: int = 0) -> list:
    """Uniformly sample distinct size-subsets of the outage devices.

    Deterministic for a fixed seed; returns every subset exactly once
    (lexicographic order) when ``count`` meets or exceeds the number of
    distinct subsets.
    """
    if size < 1:
        raise ValueError("scenario size must be at least 1")
    if count < 1:
        raise ValueError("scenario count must be at least 1")
    n = sys.n_outage
    if size > n:
        return []
    total = math.comb(n, size)
    if count >= total:
        return [ContingencyScenario(c)
                for c in itertools.combinations(range(n), size)]
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    while len(out) < count:
        pick = tuple(sorted(rng.choice(n, size=size, replace=False).tolist()))
        if pick in seen:
            continue
        seen.add(pick)
        out.append(ContingencyScenario(pick))
    return out


def check_feasibility(sys: PowerSystem, x: Dispatch,
                      scenario: ContingencyScenario,
                      tol: float = FEASIBILITY_TOL,
                      opts: SolverOptions | None = None,
                      base_state: NetworkState | None = None) -> ScenarioOutcome:
    """Judge one discrete scenario by the redispatch solve's slack."""
    opts = opts or SolverOptions()
    attack = scenario.attack(sys)
    try:
        sol = solve_third_stage(sys, x, attack, opts, base_state=base_state)
    except (ConvergenceError, SingularSystemError, NkScopfError) as exc:
        return ScenarioOutcome(scenario, "solver_failure", None, str(exc))
    slack_inf = float(np.abs(sol.s).max()) if sol.s.size else 0.0
    status = "feasible" if slack_inf <= tol else "infeasible"
    return ScenarioOutcome(scenario, status, slack_inf)


def evaluate_dispatch(sys: PowerSystem, x: Dispatch, scenarios,
                      tol: float = FEASIBILITY_TOL,
                      parallelism: int = 1,
                      opts: SolverOptions | None = None,
                      seed: int | None = None) -> ViolationReport:
    """Evaluate every scenario, optionally across worker threads.

    The report content is independent of the parallelism degree and of the
    evaluation order: outcomes are collected in scenario order and each
    evaluation is a pure function of its inputs.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("scenario list is empty")
    opts = opts or SolverOptions()
    pf = solve_power_flow(sys, x, tol=opts.pf_tol, max_iter=opts.pf_max_iter)
    if not pf.converged:
        raise ConvergenceError("dispatch is not base-feasible")
    base_state = pf.state

    def run(scenario):
        return check_feasibility(sys, x, scenario, tol, opts, base_state)

    if parallelism <= 1:
        outcomes = [run(s) for s in scenarios]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(run, scenarios))
    return ViolationReport(
        outcomes=outcomes, tol=tol, seed=seed,
        scenario_digest=scenario_digest(scenarios),
    )
