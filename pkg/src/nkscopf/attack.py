"""Inner maximization: projected gradient ascent over relaxed contingencies.

The search space is the intersection of the unit box with the L1 ball of
radius k (the outage budget).  Each iteration solves the contingency
redispatch, differentiates the loss implicitly, steps uphill and projects
back; steps that lower the loss are halved, so the recorded loss sequence is
nondecreasing.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, SingularSystemError
from .grid_model import AttackVector, PowerSystem
from .implicit_grad import attack_gradient
from .ipm import SolverOptions
from .powerflow import Dispatch, solve_power_flow
from .third_stage import ThirdStageSolution, inner_loss, solve_third_stage

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "project_attack",
    "init_attack",
    "find_worst_case_attack",
]


@dataclass(frozen=True)
class AttackConfig:
    step_size: float = 0.1
    max_iters: int = 10
    y_tol: float = 1e-4            # convergence tolerance on |y_next - y|_inf
    init: str = "uniform_small"    # uniform_small | random | warm_start
    seed: int = 0
    max_backtracks: int = 6
    failure_retries: int = 3
    # additional randomly-initialized ascent runs per attack stage (a simple
    # seed list); the best run is returned
    extra_inits: int = 1


@dataclass
class AttackTrace:
    """Per-iteration record of one projected-gradient ascent run."""

    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    projection_active: list = field(default_factory=list)
    iter_seconds: list = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    def append(self, loss, grad_norm, step, projected, seconds):
        self.losses.append(float(loss))
        self.grad_norms.append(float(grad_norm))
        self.step_sizes.append(float(step))
        self.projection_active.append(bool(projected))
        self.iter_seconds.append(float(seconds))

    def __len__(self):
        return len(self.losses)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "grad_norm", "step",
                             "projection_active"])
            for i in range(len(self.losses)):
                writer.writerow([
                    i, f"{self.losses[i]:.12g}", f"{self.grad_norms[i]:.12g}",
                    f"{self.step_sizes[i]:.12g}",
                    int(self.projection_active[i]),
                ])


def project_attack(y_raw: np.ndarray, k: int) -> AttackVector:
    """Euclidean projection onto {y in [0,1]^n : sum(y) <= k}.

    Clipping alone when it already satisfies the budget; otherwise the unique
    shift tau > 0 with sum(clip(y_raw - tau, 0, 1)) = k, found by bisection
    to 1e-10.
    """
    if k < 0:
        raise ValueError("budget must be nonnegative")
    y_raw = np.asarray(y_raw, dtype=float)
    if not np.all(np.isfinite(y_raw)):
        raise ValueError("cannot project a non-finite vector")
    y = np.clip(y_raw, 0.0, 1.0)
    if y.sum() <= k:
        return AttackVector(y, k)
    lo, hi = 0.0, float(y_raw.max())
    while hi - lo > 1e-10:
        tau = 0.5 * (lo + hi)
        total = np.clip(y_raw - tau, 0.0, 1.0).sum()
        if total > k:
            lo = tau
        else:
            hi = tau
    return AttackVector(np.clip(y_raw - hi, 0.0, 1.0), k)


def init_attack(sys: PowerSystem, k: int, strategy: str = "uniform_small",
                seed: int = 0, y_prev: np.ndarray | None = None) -> AttackVector:
    """Initial attack iterate; always lies inside the feasible set."""
    n = sys.n_outage
    if strategy == "uniform_small":
        if n == 0:
            return AttackVector(np.zeros(0), k)
        return AttackVector(np.full(n, min(k / n, 0.01)), k)
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return project_attack(rng.uniform(0.0, 1.0, n), k)
    if strategy == "warm_start":
        if y_prev is None:
            raise ValueError("warm_start strategy needs a previous attack")
        return project_attack(np.asarray(y_prev, dtype=float), k)
    raise ValueError(f"unknown attack init strategy {strategy!r}")


def _ascent_run(sys, x, attack0, k, cfg, opts, base_state):
    """One projected-gradient ascent run from a given initial attack."""
    trace = AttackTrace()
    t0 = time.perf_counter()
    attack = attack0
    sol = solve_third_stage(sys, x, attack, opts, base_state=base_state)
    loss = inner_loss(sys, sol)
    grad = attack_gradient(sys, x, attack, sol)
    gnorm = float(np.abs(grad.values).max()) if grad.values.size else 0.0
    trace.append(loss, gnorm, 0.0, False, time.perf_counter() - t0)

    best = (loss, attack, sol)
    for _ in range(cfg.max_iters):
        t0 = time.perf_counter()
        step = cfg.step_size
        accepted = None
        failures = 0
        if gnorm <= 0.0:
            break
        for _bt in range(cfg.max_backtracks + 1):
            # step length is measured as a fraction of the unit box: the
            # ascent direction is the gradient scaled to unit infinity norm
            raw = attack.values + (step / gnorm) * grad.values
            candidate = project_attack(raw, k)
            projected = bool(np.abs(candidate.values - raw).max() > 1e-12)
            try:
                cand_sol = solve_third_stage(sys, x, candidate, opts,
                                             base_state=base_state)
            except (ConvergenceError, SingularSystemError) as exc:
                failures += 1
                if failures > cfg.failure_retries:
                    trace.aborted = True
                    trace.abort_reason = (
                        f"third-stage solve failed {failures} times: {exc}"
                    )
                    return best, trace
                step *= 0.5
                continue
            cand_loss = inner_loss(sys, cand_sol)
            if cand_loss >= loss:
                accepted = (cand_loss, candidate, cand_sol, step, projected)
                break
            step *= 0.5
        if accepted is None:
            break  # no uphill step found: converged at a local maximizer
        cand_loss, candidate, cand_sol, step, projected = accepted
        dy = float(np.abs(candidate.values - attack.values).max())
        attack, sol, loss = candidate, cand_sol, cand_loss
        grad = attack_gradient(sys, x, attack, sol)
        gnorm = float(np.abs(grad.values).max()) if grad.values.size else 0.0
        trace.append(loss, gnorm, step, projected, time.perf_counter() - t0)
        if loss >= best[0]:
            best = (loss, attack, sol)
        if dy <= cfg.y_tol:
            break
    return best, trace


def find_worst_case_attack(sys: PowerSystem, x: Dispatch, k: int,
                           cfg: AttackConfig | None = None,
                           opts: SolverOptions | None = None,
                           y_prev: np.ndarray | None = None):
    """Projected gradient ascent for a worst-case relaxed contingency.

    Returns (attack, third-stage solution at the attack, trace).  The
    returned iterate is the one with the highest recorded loss; because
    loss-decreasing steps are halved away, that is the last accepted iterate
    of its run.  ``extra_inits`` additional runs start from seeded random
    points and the best run wins.  Solver failures halve the step and retry;
    after ``failure_retries`` consecutive failures a run aborts with the
    trace collected so far.
    """
    cfg = cfg or AttackConfig()
    opts = opts or SolverOptions()

    pf = solve_power_flow(sys, x, tol=opts.pf_tol, max_iter=opts.pf_max_iter)
    if not pf.converged:
        raise ConvergenceError("dispatch is not base-feasible; cannot attack")
    base_state = pf.state

    if k <= 0 or sys.n_outage == 0:
        trace = AttackTrace()
        attack = AttackVector(np.zeros(sys.n_outage), max(k, 0))
        sol = solve_third_stage(sys, x, attack, opts, base_state=base_state)
        trace.append(inner_loss(sys, sol), 0.0, 0.0, False, 0.0)
        return attack, sol, trace

    inits = []
    if cfg.init == "warm_start" or y_prev is not None:
        inits.append(init_attack(sys, k, "warm_start", cfg.seed, y_prev=y_prev))
    else:
        inits.append(init_attack(sys, k, cfg.init, cfg.seed))
    for i in range(max(cfg.extra_inits, 0)):
        inits.append(init_attack(sys, k, "random", cfg.seed + 1000 * (i + 1)))

    best = None
    best_trace = None
    for attack0 in inits:
        run_best, trace = _ascent_run(sys, x, attack0, k, cfg, opts, base_state)
        if best is None or run_best[0] > best[0]:
            best, best_trace = run_best, trace

    best_loss, best_attack, best_sol = best
    if not best_sol.matches(x, best_attack):  # pragma: no cover - safety net
        best_sol = solve_third_stage(sys, x, best_attack, opts,
                                     base_state=base_state)
    return best_attack, best_sol, best_trace
