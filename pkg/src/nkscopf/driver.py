"""Main alternating loop: attack, defend, repeat until converged.

Owns the loss definition (base cost + contingency cost + slack penalty, in
normalized units) and the run history that backs the loss-vs-iteration
reports.  The driver re-evaluates the loss against the fixed attack after
every defense step with a fresh contingency solve, halving the defense
damping when the step fails to lower it.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, find_worst_case_attack
from .defense import DefenseConfig, defense_step
from .errors import ConvergenceError, StaleSolutionError
from .grid_model import AttackVector, PowerSystem
from .ipm import SolverOptions
from .powerflow import Dispatch, NetworkState, generation_cost, solve_base_opf
from .third_stage import ThirdStageSolution, contingency_cost, solve_third_stage

__all__ = [
    "ScopfConfig",
    "LossBreakdown",
    "OuterRecord",
    "RunHistory",
    "ConvergenceDecision",
    "loss",
    "convergence_check",
    "run_scopf",
]


@dataclass(frozen=True)
class ScopfConfig:
    budget: int = 2
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    max_outer: int = 50
    loss_rtol: float = 1e-4
    loss_window: int = 3
    dispatch_tol: float = 1e-5
    warm_start_attacks: bool = True
    seed: int = 0

    def validate(self):
        if self.budget < 0:
            raise ValueError("outage budget must be nonnegative")
        for name in ("loss_rtol", "dispatch_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer < 1 or self.loss_window < 1:
            raise ValueError("max_outer and loss_window must be at least 1")
        return self


@dataclass
class LossBreakdown:
    """The three loss terms in normalized units; total is their exact sum."""

    f_base: float
    f_cont: float
    slack_half: float
    total: float
    f_base_dollars: float
    f_cont_dollars: float

    @classmethod
    def build(cls, sigma, f_base_dollars, f_cont_dollars, slack_half):
        f_base = sigma * f_base_dollars
        f_cont = sigma * f_cont_dollars
        return cls(f_base=f_base, f_cont=f_cont, slack_half=slack_half,
                   total=f_base + f_cont + slack_half,
                   f_base_dollars=f_base_dollars,
                   f_cont_dollars=f_cont_dollars)


def loss(sys: PowerSystem, x: Dispatch, attack: AttackVector,
         sol: ThirdStageSolution,
         base_state: NetworkState | None = None) -> LossBreakdown:
    """Loss of a dispatch/attack pair at a converged contingency solve."""
    if not sol.matches(x, attack):
        raise StaleSolutionError(
            "loss evaluation needs the contingency solution of exactly this "
            "(dispatch, attack) pair"
        )
    base_state = base_state or sol.base_state
    pgen = np.empty(sys.n_gen)
    pgen[sys.nonslack_gens] = x.p
    pgen[sys.slack_gen] = base_state.slack_real
    sigma = sol.problem.opts.cost_scale
    return LossBreakdown.build(
        sigma,
        generation_cost(sys, pgen),
        contingency_cost(sys, sol.gen_settings(), attack),
        0.5 * float(sol.s @ sol.s),
    )


@dataclass
class OuterRecord:
    iteration: int
    y: np.ndarray
    pre: LossBreakdown
    post: LossBreakdown
    attack_iterations: int
    attack_aborted: bool
    defense_eta: float
    defense_stalled: bool
    coupling_norm: float
    defense_pf_residual: float
    dispatch_change: float
    improved: bool
    attack_seconds: float = 0.0
    defense_seconds: float = 0.0
    attack_iter_seconds: list = field(default_factory=list)


_CSV_COLUMNS = [
    "iteration", "y_l1", "y_max", "pre_f_base", "pre_f_cont",
    "pre_slack_half", "pre_total", "post_f_base", "post_f_cont",
    "post_slack_half", "post_total", "attack_iterations", "defense_eta",
    "defense_stalled", "coupling_norm", "dispatch_change", "improved",
]


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    flagged: bool = False
    aborted: bool = False

    def __len__(self):
        return len(self.records)

    def csv_rows(self):
        for r in self.records:
            yield [
                r.iteration,
                f"{float(np.sum(r.y)):.12g}",
                f"{float(np.max(r.y)) if len(r.y) else 0.0:.12g}",
                f"{r.pre.f_base:.12g}", f"{r.pre.f_cont:.12g}",
                f"{r.pre.slack_half:.12g}", f"{r.pre.total:.12g}",
                f"{r.post.f_base:.12g}", f"{r.post.f_cont:.12g}",
                f"{r.post.slack_half:.12g}", f"{r.post.total:.12g}",
                r.attack_iterations, f"{r.defense_eta:.12g}",
                int(r.defense_stalled), f"{r.coupling_norm:.12g}",
                f"{r.dispatch_change:.12g}", int(r.improved),
            ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for row in self.csv_rows():
                writer.writerow(row)

    def append_csv_row(self, path, record_index, header_if_new=True):
        """Crash-safe per-iteration flush used by the CLI."""
        rows = list(self.csv_rows())
        mode = "a"
        with open(path, mode, newline="") as fh:
            writer = csv.writer(fh)
            if record_index == 0 and header_if_new:
                writer.writerow(_CSV_COLUMNS)
            writer.writerow(rows[record_index])
            fh.flush()

    def to_json_dict(self):
        return {
            "converged": self.converged,
            "reason": self.reason,
            "flagged": self.flagged,
            "aborted": self.aborted,
            "iterations": [
                {
                    "iteration": r.iteration,
                    "y": [float(v) for v in r.y],
                    "pre": vars_of_loss(r.pre),
                    "post": vars_of_loss(r.post),
                    "attack_iterations": r.attack_iterations,
                    "attack_aborted": r.attack_aborted,
                    "defense_eta": r.defense_eta,
                    "defense_stalled": r.defense_stalled,
                    "coupling_norm": r.coupling_norm,
                    "dispatch_change": r.dispatch_change,
                    "improved": r.improved,
                }
                for r in self.records
            ],
        }

    def stage_times(self):
        return {
            "attack_seconds": [r.attack_seconds for r in self.records],
            "defense_seconds": [r.defense_seconds for r in self.records],
            "attack_iter_seconds": [r.attack_iter_seconds for r in self.records],
        }


def vars_of_loss(lb: LossBreakdown) -> dict:
    return {
        "f_base": lb.f_base, "f_cont": lb.f_cont,
        "slack_half": lb.slack_half, "total": lb.total,
        "f_base_dollars": lb.f_base_dollars,
        "f_cont_dollars": lb.f_cont_dollars,
    }


@dataclass
class ConvergenceDecision:
    converged: bool
    reason: str
    flagged: bool = False


def convergence_check(history: RunHistory, cfg: ScopfConfig) -> ConvergenceDecision:
    """Deterministic stopping decision from the run history."""
    n = len(history.records)
    if n == 0:
        return ConvergenceDecision(False, "no iterations yet")
    last = history.records[-1]
    if n >= cfg.loss_window:
        recent = [r.post.total for r in history.records[-cfg.loss_window:]]
        scale = max(abs(recent[-1]), 1e-30)
        spread = (max(recent) - min(recent)) / scale
        if spread <= cfg.loss_rtol:
            return ConvergenceDecision(
                True,
                f"relative loss change {spread:.2e} <= {cfg.loss_rtol:g} "
                f"over {cfg.loss_window} iterations",
            )
    if last.dispatch_change <= cfg.dispatch_tol:
        return ConvergenceDecision(
            True,
            f"dispatch change {last.dispatch_change:.2e} <= {cfg.dispatch_tol:g}",
        )
    if n >= cfg.max_outer:
        return ConvergenceDecision(
            True, f"iteration budget max_outer={cfg.max_outer} reached",
            flagged=True,
        )
    return ConvergenceDecision(False, "not converged")


def run_scopf(sys: PowerSystem, cfg: ScopfConfig,
              on_iteration=None):
    """Alternate worst-case attacks and defense steps from a base-OPF start.

    Returns (final dispatch, history).  ``on_iteration`` is called with
    (history, index) after each record, which the CLI uses for crash-safe
    flushing.
    """
    cfg.validate()
    opts = cfg.solver
    opf = solve_base_opf(sys, opts)
    x = opf.dispatch
    duals = (opf.lam, opf.mu)
    history = RunHistory()
    y_prev = None
    consecutive_stalls = 0

    for it in range(1, cfg.max_outer + 1):
        t0 = time.perf_counter()
        attack_cfg = replace(cfg.attack, seed=cfg.attack.seed + it - 1)
        atk, sol, trace = find_worst_case_attack(
            sys, x, cfg.budget, attack_cfg, opts,
            y_prev=y_prev if cfg.warm_start_attacks else None,
        )
        attack_seconds = time.perf_counter() - t0
        pre = loss(sys, x, atk, sol)

        t0 = time.perf_counter()
        best = None
        eta = cfg.defense.damping
        for _attempt in range(cfg.defense.retries + 1):
            dres = defense_step(sys, x, atk, sol,
                                replace(cfg.defense, damping=eta),
                                opts, base_duals=duals)
            if dres.stalled:
                break
            post_sol = solve_third_stage(sys, dres.x, atk, opts,
                                         base_state=dres.state)
            post = loss(sys, dres.x, atk, post_sol, base_state=dres.state)
            if best is None or post.total < best[1].total:
                best = (dres, post)
            if post.total < pre.total:
                break
            eta *= 0.5
        defense_seconds = time.perf_counter() - t0

        if best is None:
            # defense could not produce a feasible step at any damping
            record = OuterRecord(
                iteration=it, y=atk.values.copy(), pre=pre, post=pre,
                attack_iterations=len(trace), attack_aborted=trace.aborted,
                defense_eta=0.0, defense_stalled=True,
                coupling_norm=float("nan"), defense_pf_residual=float("nan"),
                dispatch_change=0.0, improved=False,
                attack_seconds=attack_seconds, defense_seconds=defense_seconds,
                attack_iter_seconds=list(trace.iter_seconds),
            )
            history.records.append(record)
            if on_iteration:
                on_iteration(history, len(history.records) - 1)
            consecutive_stalls += 1
            if consecutive_stalls >= 3:
                history.aborted = True
                history.reason = "three consecutive defense stalls"
                return x, history
            continue

        dres, post = best
        improved = post.total < pre.total
        consecutive_stalls = 0 if improved else consecutive_stalls + 1
        dispatch_change = float(
            np.abs(dres.x.to_vector() - x.to_vector()).max()
        )
        record = OuterRecord(
            iteration=it, y=atk.values.copy(), pre=pre, post=post,
            attack_iterations=len(trace), attack_aborted=trace.aborted,
            defense_eta=dres.eta, defense_stalled=dres.stalled,
            coupling_norm=dres.coupling_norm,
            defense_pf_residual=dres.pf_residual,
            dispatch_change=dispatch_change, improved=improved,
            attack_seconds=attack_seconds, defense_seconds=defense_seconds,
            attack_iter_seconds=list(trace.iter_seconds),
        )
        history.records.append(record)
        if on_iteration:
            on_iteration(history, len(history.records) - 1)

        x = dres.x
        if dres.lam is not None:
            duals = (dres.lam, dres.mu)
        y_prev = atk.values
        if consecutive_stalls >= 3:
            history.aborted = True
            history.reason = "three consecutive defense stalls"
            return x, history

        decision = convergence_check(history, cfg)
        if decision.converged:
            history.converged = True
            history.reason = decision.reason
            history.flagged = decision.flagged
            return x, history

    history.converged = True
    history.flagged = True
    history.reason = f"iteration budget max_outer={cfg.max_outer} reached"
    return x, history
