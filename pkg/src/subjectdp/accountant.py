"""Privacy-loss arithmetic for subject-level DP training.

Covers Renyi accounting of the subsampled Gaussian mechanism, noise-multiplier
calibration, group-privacy conversion, the UserLDP noise constraints,
horizontal-composition planning across federation users and the excess-loss
bound calculators.

All quantities involving ``delta`` under group scaling are evaluated in log
space; ``k * exp((k - 1) * eps)`` overflows doubles quickly.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special

# Changing this grid changes every solved sigma; treat it as versioned.
ORDER_GRID_VERSION = 1
DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5) + tuple(float(a) for a in range(2, 513))

SIGMA_BRACKET = (1e-2, 1e4)
_FULL_BATCH_Q = 1.0 - 1e-12
SIGMA_RTOL = 1e-3
# Fixed depth: every solve walks the same log-spaced grid, so results are
# monotone in their inputs.
_BISECTION_STEPS = math.ceil(
    math.log2(math.log(SIGMA_BRACKET[1] / SIGMA_BRACKET[0]) / math.log1p(SIGMA_RTOL))
)


class PrivacyWarning(UserWarning):
    """A privacy calculation was clamped or used outside its stated regime."""


class BudgetInfeasibleError(ValueError):
    pass


class HorizontalMode(str, enum.Enum):
    ROUND_REDUCTION = "round_reduction"
    MINIBATCH_SCALING = "minibatch_scaling"


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair.

    Converted group budgets may carry ``delta >= 1`` (a vacuous guarantee);
    functions that calibrate noise to a target call ``check_target``.
    """

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be finite and > 0, got {self.epsilon}")
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ValueError(f"delta must be finite and > 0, got {self.delta}")

    @property
    def vacuous(self) -> bool:
        return self.delta >= 1.0

    def check_target(self) -> None:
        if not 0 < self.delta < 1:
            raise ValueError(f"target delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class AccountingParams:
    """Inputs to noise calibration besides the budget.

    Attributes:
      q: minibatch sampling fraction B / |D|.
      steps: total number of noisy minibatch steps (T * R, times s when
        minibatches are scaled for horizontal composition).
      group_size: budget is split for groups of this size before solving.
      subject_multiplier: sampling fraction is multiplied by this (HiGradAvgDP).
      c1, c2: constants of the closed-form reference bound. Not normative.
    """

    q: float
    steps: int
    group_size: int = 1
    subject_multiplier: float = 1.0
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.subject_multiplier < 1:
            raise ValueError("subject_multiplier must be >= 1")

    @property
    def effective_q(self) -> float:
        q = self.q * self.subject_multiplier
        if q > 1:
            warnings.warn(
                f"effective sampling fraction {q:.4g} > 1 clamped to 1",
                PrivacyWarning,
                stacklevel=3,
            )
            return 1.0
        return q


@dataclass(frozen=True)
class NoisePlan:
    sigma: float
    per_round_epsilon: float
    effective_rounds: int
    mode: HorizontalMode
    configured_rounds: int = 0
    steps: int = 0
    q: float = 1.0
    group_size: int = 1
    subject_multiplier: float = 1.0

    def as_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "per_round_epsilon": self.per_round_epsilon,
            "effective_rounds": self.effective_rounds,
            "configured_rounds": self.configured_rounds,
            "mode": self.mode.value,
            "steps": self.steps,
            "q": self.q,
            "group_size": self.group_size,
            "subject_multiplier": self.subject_multiplier,
        }


# ---------------------------------------------------------------------------
# Renyi accounting of the subsampled Gaussian
# ---------------------------------------------------------------------------


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(i + 1)
        - special.gammaln(alpha - i + 1)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2 * sigma**2)
    )
    return float(special.logsumexp(log_terms))


def _log_a_frac(q: float, sigma: float, alpha: float, chunk: int = 4096) -> float:
    # Split the integral at z0, where both mixture components have equal mass,
    # and expand each side as a generalised binomial series. Both series
    # alternate in sign once i > alpha, so truncation error is bounded by the
    # first omitted term.
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    logs, signs = [], []
    start = 0
    while True:
        i = np.arange(start, start + chunk, dtype=np.float64)
        coef = special.binom(alpha, i)
        log_coef = np.log(np.abs(coef))
        sign = np.sign(coef)
        j = alpha - i
        # Gaussian masses of N(i, s^2) below z0 and N(j, s^2) above z0.
        s0 = (
            log_coef + i * math.log(q) + j * math.log1p(-q)
            + (i * i - i) / (2 * sigma**2)
            + special.log_ndtr((z0 - i) / sigma)
        )
        s1 = (
            log_coef + j * math.log(q) + i * math.log1p(-q)
            + (j * j - j) / (2 * sigma**2)
            + special.log_ndtr((j - z0) / sigma)
        )
        logs += [s0, s1]
        signs += [sign, sign]
        start += chunk
        if max(s0[-1], s1[-1]) < -40 or start > 2_000_000:
            break
    value, sgn = special.logsumexp(
        np.concatenate(logs), b=np.concatenate(signs), return_sign=True
    )
    if sgn <= 0:
        raise ArithmeticError("non-positive moment in fractional-order series")
    return float(value)


def rdp_subsampled_gaussian(q: float, sigma: float, order: float) -> float:
    """Renyi DP of one step of the sampled Gaussian mechanism.

    Bounds D_order(N(0, s^2) mixed with N(1, s^2) at rate q || N(0, s^2)) for an
    L2-sensitivity-1 query. Exact ``order / (2 sigma^2)`` at q = 1.
    """
    if not order > 1:
        raise ValueError(f"order must be > 1, got {order}")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if q >= _FULL_BATCH_Q:
        # RDP is non-decreasing in q, so the full-batch value is a safe bound;
        # the series below loses all precision this close to q = 1.
        return order / (2 * sigma**2)
    if math.isinf(order):
        return math.inf
    if float(order).is_integer():
        log_a = _log_a_int(q, sigma, int(order))
    else:
        log_a = _log_a_frac(q, sigma, order)
    return max(log_a, 0.0) / (order - 1)


@lru_cache(maxsize=4096)
def _rdp_curve_cached(q: float, sigma: float, orders: tuple[float, ...]) -> np.ndarray:
    if q >= _FULL_BATCH_Q:
        return np.asarray(orders) / (2 * sigma**2)
    out = np.empty(len(orders))
    ints = [k for k, a in enumerate(orders) if float(a).is_integer()]
    for k, a in enumerate(orders):
        if k not in ints:
            out[k] = rdp_subsampled_gaussian(q, sigma, a)
    if ints:
        # All integer orders at once: rows are orders, columns binomial terms.
        alphas = np.array([orders[k] for k in ints])
        top = int(alphas.max())
        i = np.arange(top + 1, dtype=np.float64)
        a = alphas[:, None]
        with np.errstate(invalid="ignore"):
            log_terms = (
                special.gammaln(a + 1)
                - special.gammaln(i + 1)
                - special.gammaln(a - i + 1)
                + i * math.log(q)
                + (a - i) * math.log1p(-q)
                + (i * i - i) / (2 * sigma**2)
            )
        log_terms = np.where(i[None, :] <= a, log_terms, -np.inf)
        log_a = special.logsumexp(log_terms, axis=1)
        out[ints] = np.maximum(log_a, 0.0) / (alphas - 1)
    out.flags.writeable = False
    return out


def rdp_curve(q: float, sigma: float, orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP of the sampled Gaussian on a grid of orders."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    orders = tuple(float(a) for a in orders)
    if any(a <= 1 for a in orders):
        raise ValueError("orders must be > 1")
    return _rdp_curve_cached(float(q), float(sigma), orders)


def epsilon_from_rdp(orders: Sequence[float], rdp: Sequence[float], delta: float) -> float:
    """Converts an RDP curve to epsilon: min over orders of rdp + log(1/delta)/(order-1)."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if orders.size == 0:
        raise ValueError("order grid is empty")
    if orders.shape != rdp.shape:
        raise ValueError("orders and rdp must have the same shape")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return float(np.min(rdp + math.log(1 / delta) / (orders - 1)))


def epsilon_for_sigma(
    q: float, sigma: float, steps: int, delta: float, orders: Sequence[float] = DEFAULT_ORDERS
) -> float:
    """Epsilon spent by ``steps`` compositions of the sampled Gaussian."""
    return epsilon_from_rdp(orders, steps * rdp_curve(q, sigma, orders), delta)


# ---------------------------------------------------------------------------
# Group privacy
# ---------------------------------------------------------------------------


def log_group_delta(epsilon: float, delta: float, k: int, variant: str = "loose") -> float:
    """log of the group-k failure probability for an (epsilon, delta) mechanism."""
    if k < 1:
        raise ValueError(f"group size must be >= 1, got {k}")
    if k == 1:
        return math.log(delta)
    if variant == "loose":
        return math.log(k) + (k - 1) * epsilon + math.log(delta)
    if variant == "tight":
        # (e^{k eps} - 1) / (e^{eps} - 1) = e^{(k-1) eps} (1 - e^{-k eps}) / (1 - e^{-eps})
        return (
            (k - 1) * epsilon
            + math.log(-math.expm1(-k * epsilon))
            - math.log(-math.expm1(-epsilon))
            + math.log(delta)
        )
    raise ValueError(f"unknown variant {variant!r}; expected 'loose' or 'tight'")


def group_dp_convert(base: PrivacyBudget, k: int, variant: str = "loose") -> PrivacyBudget:
    """Budget that an (eps, delta)-DP mechanism guarantees for groups of k items.

    ``loose`` gives (k eps, k e^{(k-1) eps} delta); ``tight`` gives
    (k eps, (e^{k eps} - 1)/(e^{eps} - 1) delta).

    Raises:
      OverflowError: the converted delta is not representable as a double.
    """
    log_delta = log_group_delta(base.epsilon, base.delta, k, variant)
    if k == 1:
        return base
    if log_delta > math.log(np.finfo(np.float64).max):
        raise OverflowError(
            f"group delta exp({log_delta:.1f}) overflows; use log_group_delta"
        )
    return PrivacyBudget(k * base.epsilon, math.exp(log_delta))


def group_budget_split(total: PrivacyBudget, Z: int) -> PrivacyBudget:
    """Per-item budget whose loose group-Z conversion equals ``total``."""
    if Z < 1:
        raise ValueError(f"group size must be >= 1, got {Z}")
    if Z == 1:
        return total
    eps = total.epsilon / Z
    log_delta = math.log(total.delta) - math.log(Z) - (Z - 1) * eps
    return PrivacyBudget(eps, math.exp(log_delta))


# ---------------------------------------------------------------------------
# Noise calibration
# ---------------------------------------------------------------------------


def _target_for(budget: PrivacyBudget, params: AccountingParams) -> PrivacyBudget:
    budget.check_target()
    if params.group_size > 1:
        return group_budget_split(budget, params.group_size)
    return budget


def solve_sigma(
    budget: PrivacyBudget,
    params: AccountingParams,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier meeting ``budget`` over ``params.steps`` steps.

    Bisects in log space over ``SIGMA_BRACKET`` to relative resolution
    ``SIGMA_RTOL``. If ``params.group_size > 1`` the budget is first split with
    ``group_budget_split``.

    Raises:
      BudgetInfeasibleError: even the largest sigma in the bracket overspends.
    """
    target = _target_for(budget, params)
    return _solve(target.epsilon, target.delta, params.effective_q, params.steps,
                  tuple(float(a) for a in orders))


@lru_cache(maxsize=8192)
def _solve(epsilon: float, delta: float, q: float, steps: int, orders: tuple) -> float:
    def spent(sigma):
        return epsilon_for_sigma(q, sigma, steps, delta, orders)

    lo, hi = math.log(SIGMA_BRACKET[0]), math.log(SIGMA_BRACKET[1])
    if spent(math.exp(hi)) > epsilon:
        raise BudgetInfeasibleError(
            f"budget infeasible: epsilon={epsilon:.4g}, delta={delta:.3g} not reachable "
            f"with sigma <= {SIGMA_BRACKET[1]:g} (q={q:.4g}, steps={steps})"
        )
    if spent(math.exp(lo)) <= epsilon:
        return math.exp(lo)
    for _ in range(_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if spent(math.exp(mid)) <= epsilon:
            hi = mid
        else:
            lo = mid
    return math.exp(hi)


class ClosedFormSigma(NamedTuple):
    sigma: float
    precondition_met: bool


def closed_form_sigma(budget: PrivacyBudget, params: AccountingParams) -> ClosedFormSigma:
    """Reference bound c2 * k * q * sqrt(T log(1/delta)) / eps.

    ``k`` is ``params.subject_multiplier``. Valid only for
    eps < c1 * k^2 * q^2 * T; outside that range a PrivacyWarning is issued and
    the value is flagged. The constants are unknown in general, so this is a
    cross-check, never the calibration used for training.
    """
    target = _target_for(budget, params)
    k, q, T = params.subject_multiplier, params.q, params.steps
    sigma = params.c2 * k * q * math.sqrt(T * math.log(1 / target.delta)) / target.epsilon
    ok = target.epsilon < params.c1 * k**2 * q**2 * T
    if not ok:
        warnings.warn(
            f"closed-form precondition eps < c1 k^2 q^2 T violated "
            f"({target.epsilon:.4g} >= {params.c1 * k**2 * q**2 * T:.4g})",
            PrivacyWarning,
            stacklevel=2,
        )
    return ClosedFormSigma(sigma, ok)


class UserLDPSigma(NamedTuple):
    sigma: float
    accountant_sigma: float
    randomized_response_sigma: float


def randomized_response_sigma(budget: PrivacyBudget) -> float:
    """Lower bound 1 / (sqrt(2 pi) eps delta e^eps) for UserLDP's round output."""
    log_inv = -(
        0.5 * math.log(2 * math.pi) + math.log(budget.epsilon)
        + math.log(budget.delta) + budget.epsilon
    )
    return math.exp(log_inv)


def userldp_sigma(budget: PrivacyBudget, steps: int,
                  orders: Sequence[float] = DEFAULT_ORDERS) -> UserLDPSigma:
    """Noise multiplier for UserLDP: the larger of both constraints.

    The accountant constraint is solved at q = 1 since a participating user
    exposes every one of its minibatches.
    """
    acc = solve_sigma(budget, AccountingParams(q=1.0, steps=steps), orders)
    rr = randomized_response_sigma(budget)
    return UserLDPSigma(max(acc, rr), acc, rr)


# ---------------------------------------------------------------------------
# Rounds and horizontal composition
# ---------------------------------------------------------------------------


def apportion_per_round(epsilon: float, R: int) -> float:
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    return epsilon / math.sqrt(R)


@dataclass(frozen=True)
class HorizontalPlan:
    configured_rounds: int
    effective_rounds: int
    step_multiplier: int
    mode: HorizontalMode


def reduced_rounds(R: int, s: int) -> int:
    """ceil(R / sqrt(s)) in exact integer arithmetic."""
    # smallest e with e^2 * s >= R^2
    e = math.isqrt(-(-R * R // s))
    while e * e * s < R * R:
        e += 1
    return max(e, 1)


def plan_horizontal(R: int, s: int, mode: HorizontalMode | str) -> HorizontalPlan:
    """Accounts for subject-level loss composing across the s users of a round.

    ``round_reduction`` trains ceil(R / sqrt(s)) rounds with noise solved for
    R rounds; ``minibatch_scaling`` trains all R rounds with noise solved for
    s times as many minibatches.
    """
    if R < 1 or s < 1:
        raise ValueError("R and s must be >= 1")
    mode = HorizontalMode(mode)
    if mode is HorizontalMode.ROUND_REDUCTION:
        return HorizontalPlan(R, reduced_rounds(R, s), 1, mode)
    return HorizontalPlan(R, R, s, mode)


# ---------------------------------------------------------------------------
# Excess population loss bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilityBoundInputs:
    """Parameters of the excess-loss bounds for convex L-Lipschitz losses.

    ``k`` is the group size (LocalGroupDP) or items per subject (HiGradAvgDP);
    ``m`` the minibatch size (UserLDP).
    """

    L: float
    M: float
    eta: float
    T: int
    n: int
    d: int
    epsilon: float
    delta: float
    k: float = 1.0
    q: float = 1.0
    m: int = 1
    c2: float = 1.0

    def __post_init__(self):
        for name in ("L", "M", "eta", "T", "n", "d", "epsilon", "delta", "k", "q", "m", "c2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if self.delta >= 1:
            raise ValueError("delta must be < 1")


def _stability_term(x: UtilityBoundInputs) -> float:
    return x.L**2 * x.eta * (x.T + 1) / x.n


def _group_noise_term(x: UtilityBoundInputs, k: float, q: float) -> float:
    log_term = math.log(k) + (k - 1) * x.epsilon / k - math.log(x.delta)
    return x.eta * x.d * x.c2**2 * k**2 * q**2 / x.epsilon**2 * x.T * log_term


def utility_bound_localgroupdp(x: UtilityBoundInputs) -> float:
    """M^2/(2 eta T) + eta L^2/2 + eta d c2^2 k^2 q^2/eps^2 T log(k e^{(k-1)eps/k}/delta)
    + L^2 eta (T+1)/n."""
    return (
        x.M**2 / (2 * x.eta * x.T)
        + x.eta * x.L**2 / 2
        + _group_noise_term(x, x.k, x.q)
        + _stability_term(x)
    )


def utility_bound_userldp(x: UtilityBoundInputs) -> float:
    """The LocalGroupDP bound with the minibatch size m as group size and q = 1."""
    return (
        x.M**2 / (2 * x.eta * x.T)
        + x.eta * x.L**2 / 2
        + _group_noise_term(x, float(x.m), 1.0)
        + _stability_term(x)
    )


def utility_bound_higradavgdp(x: UtilityBoundInputs) -> float:
    k = x.k
    first = (k**2 * x.M**2 + x.eta**2 * x.T * x.L**2) / (2 * k * x.eta * x.T)
    noise = (
        x.eta * x.d * x.c2**2 * k**2 * x.q**2 / x.epsilon**2 * x.T * math.log(1 / x.delta)
    )
    return first + noise + _stability_term(x)
