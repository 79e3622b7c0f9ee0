"""APStar driver: search simplex weights for the minimax Pareto-fair solution.

A *solver* is any callable ``solver(mu) -> (handle, risks)`` that minimises the
``mu``-weighted sum of group risks and reports the per-group risks of its
solution (validation risks for trained models, exact risks for oracles).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .core import APStarConfig, active_mask, apstar_update, as_risk_vector, as_simplex

Solver = Callable[[np.ndarray], "tuple[Any, np.ndarray]"]


class SolverError(RuntimeError):
    """A solver call failed; carries the APStar iteration it happened in."""

    def __init__(self, iteration: int, mu: np.ndarray, cause: BaseException):
        super().__init__(f"solver failed at APStar iteration {iteration} (mu={np.round(mu, 6).tolist()}): {cause}")
        self.iteration = iteration
        self.mu = mu


@dataclass
class IterationRecord:
    iter: int
    mu: np.ndarray
    risks: np.ndarray
    minimax: float
    k: int
    improved: bool
    best_minimax: float

    def to_json(self) -> dict:
        return {
            "iter": self.iter,
            "mu": self.mu.tolist(),
            "risks": self.risks.tolist(),
            "minimax": self.minimax,
            "k": self.k,
            "improved": self.improved,
        }


@dataclass
class APStarTrace:
    records: list[IterationRecord] = field(default_factory=list)
    best_handle: Any = None
    best_mu: np.ndarray | None = None
    best_risks: np.ndarray | None = None

    @property
    def best_minimax(self) -> float:
        return float(np.max(self.best_risks))

    @property
    def n_iterations(self) -> int:
        return len(self.records) - 1

    def best_minimax_history(self) -> np.ndarray:
        return np.array([rec.best_minimax for rec in self.records])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.iter_jsonl():
                fh.write(line + "\n")

    def iter_jsonl(self) -> Iterable[str]:
        for rec in self.records:
            yield json.dumps(rec.to_json())


def read_trace_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _evaluate(solver: Solver, mu: np.ndarray, iteration: int):
    try:
        handle, risks = solver(mu.copy())
        risks = as_risk_vector(risks)
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise SolverError(iteration, mu, exc) from exc
    if risks.shape != mu.shape:
        raise SolverError(iteration, mu, ValueError(f"solver returned {risks.size} risks for {mu.size} groups"))
    return handle, risks


def run_apstar(solver: Solver, mu0=None, config: APStarConfig | None = None, n_groups: int | None = None) -> APStarTrace:
    """Run APStar from ``mu0`` (uniform when omitted) and return the full trace.

    The mask at every step marks groups whose current risk is at or above the
    best minimax seen so far. The step counter is capped at ``k_min`` whenever
    the minimax strictly improves. The loop stops after ``max_iterations``
    updates, or after ``patience_iters`` consecutive updates without lowering
    the best minimax by more than ``improvement_tolerance``.
    """
    config = config or APStarConfig()
    if mu0 is None:
        if n_groups is None:
            raise ValueError("pass mu0 or n_groups")
        mu0 = np.full(n_groups, 1.0 / n_groups)
    mu = as_simplex(mu0).copy()

    handle, risks = _evaluate(solver, mu, 0)
    best = float(risks.max())
    trace = APStarTrace(best_handle=handle, best_mu=mu.copy(), best_risks=risks.copy())
    k = 1
    trace.records.append(IterationRecord(0, mu.copy(), risks.copy(), best, k, True, best))
    if mu.size == 1:
        return trace

    stale = 0
    for it in range(1, config.max_iterations + 1):
        mask = active_mask(risks, best)
        mu = apstar_update(mu, mask, k, config.alpha)
        handle, risks = _evaluate(solver, mu, it)
        k += 1
        minimax = float(risks.max())
        improved = minimax < best
        if improved:
            stale = 0 if best - minimax > config.improvement_tolerance else stale + 1
            best = minimax
            k = min(k, config.k_min)
            trace.best_handle, trace.best_mu, trace.best_risks = handle, mu.copy(), risks.copy()
        else:
            stale += 1
        trace.records.append(IterationRecord(it, mu.copy(), risks.copy(), minimax, k, improved, best))
        if stale >= config.patience_iters:
            break
    return trace
