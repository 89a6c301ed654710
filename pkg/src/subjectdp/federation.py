"""Server loop: user sampling, noise stamping, federated averaging, evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import accountant as acct
from .data import FederationLayout, SubjectDataset, max_subject_cardinality, mean_subject_cardinality
from .models import ModelSpec, evaluate, init_params
from .rng import Purpose, RngStreams
from .trainers import Algorithm, BatchAudit, GroupSigmaCache, TrainerConfig, TrainingError, train_local

REPORT_SCHEMA = "subjectdp.round/1"


class FederationError(RuntimeError):
    pass


def sample_users(n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """s distinct users out of n, uniformly, in increasing order."""
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    return np.sort(rng.choice(n, size=s, replace=False))


def federated_average(params: list[np.ndarray], s: int | None = None) -> np.ndarray:
    """Coordinate-wise mean, correctly rounded per coordinate.

    Each coordinate is summed with ``math.fsum``, so the result does not depend
    on the order of the inputs.
    """
    if not params:
        raise ValueError("nothing to average")
    s = len(params) if s is None else s
    if s != len(params):
        raise ValueError(f"expected {s} parameter vectors, got {len(params)}")
    shapes = {p.shape for p in params}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch among parameter vectors: {sorted(shapes)}")
    stack = np.stack(params)
    return np.array([math.fsum(col) for col in stack.T]) / s


@dataclass(frozen=True)
class RoundPlan:
    """Rounds to execute and rounds the noise is accounted over.

    Attributes:
      accounted_rounds: rounds the per-user noise is solved for. Equals R,
        times s in minibatch_scaling mode for subject-level algorithms.
    """

    total_rounds_configured: int
    effective_rounds: int
    s: int
    mode: acct.HorizontalMode
    accounted_rounds: int


def make_round_plan(algorithm: Algorithm | str, R: int, s: int,
                    mode: acct.HorizontalMode | str = acct.HorizontalMode.ROUND_REDUCTION) -> RoundPlan:
    """Applies horizontal composition to subject-level algorithms.

    Item-level algorithms keep all R rounds: an item lives at one user only,
    so its loss does not compose across the users of a round.
    """
    algorithm = Algorithm(algorithm)
    mode = acct.HorizontalMode(mode)
    if not algorithm.subject_level:
        if R < 1 or s < 1:
            raise ValueError("R and s must be >= 1")
        return RoundPlan(R, R, s, mode, R)
    hp = acct.plan_horizontal(R, s, mode)
    return RoundPlan(R, hp.effective_rounds, s, mode, R * hp.step_multiplier)


@dataclass(frozen=True)
class TrainingSettings:
    """User-side settings shared by every user unless overridden."""

    algorithm: Algorithm
    B: int
    T: int
    C: float
    eta: float
    budget: acct.PrivacyBudget | None = None
    subject_k: str = "max"
    T_overrides: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.algorithm.private and self.budget is None:
            raise ValueError(f"{self.algorithm.value} needs a privacy budget")
        if self.subject_k not in ("max", "mean"):
            raise ValueError("subject_k must be 'max' or 'mean'")


@dataclass(frozen=True)
class UserNoise:
    """Calibration record for one user."""

    user: int
    T: int
    q: float
    steps: int
    sigma: float | None
    subject_multiplier: float = 1.0
    group_sigmas: tuple[tuple[int, float], ...] = ()

    def as_dict(self) -> dict:
        d = {"user": self.user, "T": self.T, "q": self.q, "steps": self.steps,
             "sigma": self.sigma, "subject_multiplier": self.subject_multiplier}
        if self.group_sigmas:
            d["group_sigmas"] = {str(z): s for z, s in self.group_sigmas}
        return d


def stamp_configs(
    layout: FederationLayout,
    settings: TrainingSettings,
    plan: RoundPlan,
    orders=acct.DEFAULT_ORDERS,
) -> dict[int, TrainerConfig]:
    """Builds every user's TrainerConfig with accountant-derived noise.

    Each user is calibrated for its own sampling fraction and T, over
    ``plan.accounted_rounds`` rounds, so all users spend the same budget.
    """
    configs = {}
    for u, ds in enumerate(layout.user_datasets):
        if len(ds) == 0:
            raise ValueError(f"user {u} holds no data")
        T = int(settings.T_overrides.get(u, settings.T))
        sigma, group_sigma = _calibrate(ds, T, settings, plan, orders)
        configs[u] = TrainerConfig(settings.algorithm, settings.B, T, settings.C, settings.eta,
                                   sigma=sigma, group_sigma=group_sigma)
    return configs


def _calibrate(ds: SubjectDataset, T: int, settings: TrainingSettings, plan: RoundPlan,
               orders) -> tuple[float, GroupSigmaCache | None]:
    algo, budget = settings.algorithm, settings.budget
    steps = max(T * plan.accounted_rounds, 1)
    q = min(settings.B / len(ds), 1.0)
    if algo is Algorithm.LOCAL_ITEM_DP:
        return acct.solve_sigma(budget, acct.AccountingParams(q, steps), orders), None
    if algo is Algorithm.LOCAL_GROUP_DP:
        cache = GroupSigmaCache(
            lambda Z: acct.solve_sigma(budget, acct.AccountingParams(q, steps, group_size=Z), orders)
        )
        return cache(1), cache
    if algo is Algorithm.HIGRADAVG_DP:
        k = _subject_k(ds, settings.subject_k)
        return acct.solve_sigma(budget, acct.AccountingParams(q, steps, subject_multiplier=k), orders), None
    if algo is Algorithm.USERLDP:
        return acct.userldp_sigma(budget, steps, orders).sigma, None
    return 0.0, None


def _subject_k(ds: SubjectDataset, how: str) -> float:
    k = max_subject_cardinality(ds) if how == "max" else mean_subject_cardinality(ds)
    return max(float(k), 1.0)


def describe_noise(configs: Mapping[int, TrainerConfig], layout: FederationLayout,
                   settings: TrainingSettings, plan: RoundPlan) -> list[UserNoise]:
    out = []
    for u, cfg in sorted(configs.items()):
        n = len(layout.user_datasets[u])
        k = 1.0
        if settings.algorithm is Algorithm.HIGRADAVG_DP:
            k = _subject_k(layout.user_datasets[u], settings.subject_k)
        groups = ()
        if settings.algorithm is Algorithm.LOCAL_GROUP_DP:
            groups = tuple(cfg.group_sigma.items())
        out.append(UserNoise(
            user=u, T=cfg.T, q=min(cfg.B / n, 1.0), steps=cfg.T * plan.accounted_rounds,
            sigma=cfg.sigma if settings.algorithm.private else None,
            subject_multiplier=k, group_sigmas=groups,
        ))
    return out


@dataclass
class RoundReport:
    round: int
    test_loss: float
    test_accuracy: float
    users: list[int]
    audits: list[BatchAudit] = field(repr=False, default_factory=list)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        """Deterministic record; wall time and audits are kept out."""
        return {
            "schema": REPORT_SCHEMA,
            "round": self.round,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "users": self.users,
            "batches": len(self.audits),
        }


@dataclass
class FederationResult:
    reports: list[RoundReport]
    params: np.ndarray
    initial_params: np.ndarray


def run_federation(
    layout: FederationLayout,
    spec: ModelSpec,
    configs: TrainerConfig | Mapping[int, TrainerConfig],
    plan: RoundPlan,
    eval_dataset: SubjectDataset,
    seed: int,
    init: np.ndarray | None = None,
    on_round: Callable[[RoundReport], None] | None = None,
) -> FederationResult:
    """Runs ``plan.effective_rounds`` rounds of sample / train / average / evaluate.

    Raises:
      FederationError: a user's trainer failed; the message names the round.
    """
    n = layout.n_users
    if plan.s > n:
        raise ValueError(f"cannot sample s={plan.s} users out of {n}")
    if isinstance(configs, TrainerConfig):
        configs = {u: configs for u in range(n)}
    missing = [u for u in range(n) if u not in configs]
    if missing:
        raise ValueError(f"no trainer config for users {missing}")
    streams = RngStreams(seed)
    params = init_params(spec, streams.generator(Purpose.INIT)) if init is None else np.array(init, dtype=np.float64)
    initial = params.copy()
    reports = []
    for r in range(plan.effective_rounds):
        start = time.perf_counter()
        users = sample_users(n, plan.s, streams.generator(Purpose.USERS, r))
        new, audits = [], []
        for u in users:
            u = int(u)
            try:
                p_u, a_u = train_local(configs[u], spec, params, layout.user_datasets[u],
                                       streams.for_user(u, r))
            except TrainingError as exc:
                raise FederationError(f"round {r}: {exc}") from exc
            new.append(p_u)
            audits.extend(a_u)
        params = federated_average(new)
        ev = evaluate(spec, params, eval_dataset)
        report = RoundReport(r, ev.loss, ev.accuracy, [int(u) for u in users], audits,
                             time.perf_counter() - start)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return FederationResult(reports, params, initial)
