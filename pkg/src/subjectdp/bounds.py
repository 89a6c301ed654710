"""Run-time evaluation of the excess-loss bounds for convex models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import accountant as acct
from .data import SubjectDataset
from .models import ModelSpec, batch_gradient, estimate_lipschitz, losses


def empirical_loss(spec: ModelSpec, params: np.ndarray, dataset: SubjectDataset) -> float:
    return float(losses(spec, params, dataset.features, dataset.labels).mean())


def minimize_empirical_loss(spec: ModelSpec, dataset: SubjectDataset,
                            x0: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Non-private minimiser of the mean training loss (L-BFGS)."""
    if not spec.convex:
        raise ValueError("non-convex; bounds not applicable")
    X, y = dataset.features, dataset.labels

    def fun(p):
        return float(losses(spec, p, X, y).mean()), batch_gradient(spec, p, X, y)

    x0 = np.zeros(spec.dim) if x0 is None else x0
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"maxiter": 2000, "gtol": 1e-10})
    return res.x, float(res.fun)


@dataclass(frozen=True)
class BoundCheck:
    bound: str
    value: float
    inputs: acct.UtilityBoundInputs
    excess_loss: float

    @property
    def holds(self) -> bool:
        return self.excess_loss <= self.value


_CALCULATORS = {
    "localgroupdp": acct.utility_bound_localgroupdp,
    "higradavgdp": acct.utility_bound_higradavgdp,
    "userldp": acct.utility_bound_userldp,
}


def check_bounds(
    spec: ModelSpec,
    train: SubjectDataset,
    initial: np.ndarray,
    final: np.ndarray,
    *,
    eta: float,
    steps: int,
    budget: acct.PrivacyBudget,
    q: float,
    k: float = 1.0,
    m: int = 1,
) -> list[BoundCheck]:
    """Evaluates each bound at the run's inputs next to the measured excess loss.

    L is estimated from the features, M is the distance from the initial
    parameters to the non-private minimiser and the excess loss is measured on
    the training data. No projection onto a bounded domain is performed, so
    the comparison is a sanity check, not a guarantee that the bounds apply.
    """
    L = estimate_lipschitz(spec, train).L
    opt, best = minimize_empirical_loss(spec, train, x0=initial.copy())
    M = max(float(np.linalg.norm(opt - initial)), math.ulp(1.0))
    excess = empirical_loss(spec, final, train) - best
    inputs = acct.UtilityBoundInputs(
        L=max(L, math.ulp(1.0)), M=M, eta=eta, T=max(steps, 1), n=len(train), d=spec.dim,
        epsilon=budget.epsilon, delta=budget.delta, k=k, q=q, m=m,
    )
    return [BoundCheck(name, f(inputs), inputs, excess) for name, f in _CALCULATORS.items()]
