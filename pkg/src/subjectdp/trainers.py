"""Local training procedures run by a federation user in one round.

Private trainers:

* ``local_item_dp``: per-item clipping, Gaussian noise on the clipped sum.
* ``local_group_dp``: as above, with the noise multiplier chosen per batch for
  the largest number of items any one subject has in it.
* ``higradavg_dp``: per-item clipping, then averaging within each subject, so
  every subject contributes at most C; noise is scaled to C.
* ``userldp``: the whole batch gradient is clipped as one vector.

``fedavg`` is the non-private baseline. The ``*_sgd`` reference trainers are
the private trainers with the noise step removed; they exist so that the
zero-noise behaviour of each private trainer can be checked against an
independent implementation.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import data
from .models import ModelSpec, NonFiniteError, apply_update, clip, clip_rows, per_example_gradients
from .rng import UserRoundStreams

AUDIT_SCHEMA = "subjectdp.audit/1"


class Algorithm(str, enum.Enum):
    FEDAVG = "fedavg"
    LOCAL_ITEM_DP = "local_item_dp"
    LOCAL_GROUP_DP = "local_group_dp"
    HIGRADAVG_DP = "higradavg_dp"
    USERLDP = "userldp"
    # noise-free references
    CLIPPED_SGD = "clipped_sgd"
    HIER_AVG_SGD = "hier_avg_sgd"
    BATCH_CLIPPED_SGD = "batch_clipped_sgd"

    @property
    def private(self) -> bool:
        return self in PRIVATE_ALGORITHMS

    @property
    def subject_level(self) -> bool:
        return self in (Algorithm.LOCAL_GROUP_DP, Algorithm.HIGRADAVG_DP, Algorithm.USERLDP)


PRIVATE_ALGORITHMS = (
    Algorithm.LOCAL_ITEM_DP,
    Algorithm.LOCAL_GROUP_DP,
    Algorithm.HIGRADAVG_DP,
    Algorithm.USERLDP,
)
PUBLIC_ALGORITHMS = (Algorithm.FEDAVG,) + PRIVATE_ALGORITHMS

NONPRIVATE_COUNTERPART = {
    Algorithm.LOCAL_ITEM_DP: Algorithm.CLIPPED_SGD,
    Algorithm.LOCAL_GROUP_DP: Algorithm.CLIPPED_SGD,
    Algorithm.HIGRADAVG_DP: Algorithm.HIER_AVG_SGD,
    Algorithm.USERLDP: Algorithm.BATCH_CLIPPED_SGD,
}


class TrainingError(RuntimeError):
    pass


class GroupSigmaCache:
    """Memoised map from group size Z to the noise multiplier sigma_Z.

    ``solve`` is called on a miss; a larger Z never reuses a smaller Z's value.
    """

    def __init__(self, solve: Callable[[int], float]):
        self._solve = solve
        self._values: dict[int, float] = {}

    def __call__(self, Z: int) -> float:
        if Z < 1:
            raise ValueError(f"group size must be >= 1, got {Z}")
        if Z not in self._values:
            self._values[Z] = float(self._solve(Z))
        return self._values[Z]

    def items(self):
        return sorted(self._values.items())


@dataclass
class TrainerConfig:
    """Settings for one user's local round.

    Attributes:
      sigma: noise multiplier in force (all private trainers but LocalGroupDP).
      group_sigma: Z -> sigma_Z, LocalGroupDP only.
      sigma_override: test hook; replaces every noise multiplier when set.
      noise_observer: called with every injected noise vector.
    """

    algorithm: Algorithm
    B: int
    T: int
    C: float = 1.0
    eta: float = 0.1
    sigma: float = 0.0
    group_sigma: GroupSigmaCache | None = None
    sigma_override: float | None = None
    noise_observer: Callable[[np.ndarray], None] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if self.B < 1 or self.T < 0:
            raise ValueError("B must be >= 1 and T >= 0")
        if not self.C > 0:
            raise ValueError("clipping threshold C must be > 0")
        if self.algorithm is Algorithm.LOCAL_GROUP_DP and self.group_sigma is None \
                and self.sigma_override is None:
            raise ValueError("local_group_dp needs group_sigma")

    def noise_multiplier(self, Z: int | None = None) -> float:
        if self.sigma_override is not None:
            return self.sigma_override
        if self.algorithm is Algorithm.LOCAL_GROUP_DP:
            return self.group_sigma(Z)
        return self.sigma


@dataclass
class BatchAudit:
    """What one noisy step did, for audit and plotting.

    ``sensitivity`` is the norm the trainer's privacy argument bounds by C:
    per-item clipped norms (item/group DP), per-subject averages (HiGradAvgDP)
    or the clipped batch gradient (UserLDP).
    """

    user: int
    round: int
    batch: int
    algorithm: str
    batch_size: int
    q: float
    loss: float
    noise_std_used: float
    pre_clip_max: float
    post_clip_max: float
    sensitivity: float | None = None
    noise_norm: float = 0.0
    observed_Z: int | None = None
    distinct_subjects: int | None = None
    round_sensitivity: float | None = None

    def to_json(self) -> dict:
        return {"schema": AUDIT_SCHEMA, **asdict(self)}


# ---------------------------------------------------------------------------
# Step rules. Each returns (gradient estimate, audit fields).
# ---------------------------------------------------------------------------


def _noise(cfg: TrainerConfig, streams: UserRoundStreams, t: int, std: float, dim: int):
    if std == 0:
        return None
    z = streams.noise(t).standard_normal(dim) * std
    if cfg.noise_observer is not None:
        cfg.noise_observer(z)
    return z


def _fedavg(cfg, G, subjects, streams, t):
    norms = np.linalg.norm(G, axis=1)
    m = float(norms.max())
    return G.mean(axis=0), dict(noise_std_used=0.0, pre_clip_max=m, post_clip_max=m)


def _item_clipped(cfg, G, subjects, streams, t, std, **extra):
    clipped, norms = clip_rows(G, cfg.C)
    post = float(np.linalg.norm(clipped, axis=1).max())
    total = clipped.sum(axis=0)
    z = _noise(cfg, streams, t, std, G.shape[1])
    if z is not None:
        total = total + z
    info = dict(
        noise_std_used=std,
        pre_clip_max=float(norms.max()),
        post_clip_max=post,
        sensitivity=post,
        noise_norm=0.0 if z is None else float(np.linalg.norm(z)),
        **extra,
    )
    return total / G.shape[0], info


def _local_item_dp(cfg, G, subjects, streams, t):
    return _item_clipped(cfg, G, subjects, streams, t, cfg.noise_multiplier() * cfg.C)


def _local_group_dp(cfg, G, subjects, streams, t):
    _, counts = np.unique(subjects, return_counts=True)
    Z = int(counts.max())
    std = cfg.noise_multiplier(Z) * cfg.C
    return _item_clipped(cfg, G, subjects, streams, t, std, observed_Z=Z)


def _clipped_sgd(cfg, G, subjects, streams, t):
    clipped, norms = clip_rows(G, cfg.C)
    post = float(np.linalg.norm(clipped, axis=1).max())
    info = dict(noise_std_used=0.0, pre_clip_max=float(norms.max()),
                post_clip_max=post, sensitivity=post)
    return clipped.sum(axis=0) / G.shape[0], info


def subject_averages(clipped: np.ndarray, subjects: np.ndarray) -> np.ndarray:
    """Mean of the rows of ``clipped`` within each subject, one row per subject."""
    ids, inverse, counts = np.unique(subjects, return_inverse=True, return_counts=True)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    sums = np.add.reduceat(clipped[order], starts, axis=0)
    return sums / counts[:, None]


def _hier(cfg, G, subjects, streams, t, std):
    clipped, norms = clip_rows(G, cfg.C)
    avgs = subject_averages(clipped, subjects)
    total = avgs.sum(axis=0)
    z = None if std is None else _noise(cfg, streams, t, std, G.shape[1])
    if z is not None:
        total = total + z
    info = dict(
        noise_std_used=0.0 if std is None else std,
        pre_clip_max=float(norms.max()),
        post_clip_max=float(np.linalg.norm(clipped, axis=1).max()),
        sensitivity=float(np.linalg.norm(avgs, axis=1).max()),
        noise_norm=0.0 if z is None else float(np.linalg.norm(z)),
        distinct_subjects=int(avgs.shape[0]),
    )
    return total / avgs.shape[0], info


def _higradavg_dp(cfg, G, subjects, streams, t):
    return _hier(cfg, G, subjects, streams, t, cfg.noise_multiplier() * cfg.C)


def _hier_avg_sgd(cfg, G, subjects, streams, t):
    return _hier(cfg, G, subjects, streams, t, None)


def _batch(cfg, G, subjects, streams, t, std):
    g = G.mean(axis=0)
    pre = float(np.linalg.norm(g))
    g = clip(g, cfg.C)
    post = float(np.linalg.norm(g))
    z = None if std is None else _noise(cfg, streams, t, std, G.shape[1])
    if z is not None:
        g = g + z
    info = dict(
        noise_std_used=0.0 if std is None else std,
        pre_clip_max=pre,
        post_clip_max=post,
        sensitivity=post,
        noise_norm=0.0 if z is None else float(np.linalg.norm(z)),
        round_sensitivity=cfg.eta * cfg.T * cfg.C,
    )
    return g, info


def _userldp(cfg, G, subjects, streams, t):
    return _batch(cfg, G, subjects, streams, t, cfg.noise_multiplier() * cfg.C)


def _batch_clipped_sgd(cfg, G, subjects, streams, t):
    return _batch(cfg, G, subjects, streams, t, None)


_STEPS = {
    Algorithm.FEDAVG: _fedavg,
    Algorithm.LOCAL_ITEM_DP: _local_item_dp,
    Algorithm.LOCAL_GROUP_DP: _local_group_dp,
    Algorithm.HIGRADAVG_DP: _higradavg_dp,
    Algorithm.USERLDP: _userldp,
    Algorithm.CLIPPED_SGD: _clipped_sgd,
    Algorithm.HIER_AVG_SGD: _hier_avg_sgd,
    Algorithm.BATCH_CLIPPED_SGD: _batch_clipped_sgd,
}


def train_local(
    config: TrainerConfig,
    spec: ModelSpec,
    params: np.ndarray,
    dataset: data.SubjectDataset,
    streams: UserRoundStreams,
) -> tuple[np.ndarray, list[BatchAudit]]:
    """Runs ``config.T`` steps of ``config.algorithm`` on one user's data.

    Raises:
      TrainingError: a loss, gradient or update became non-finite.
    """
    step = _STEPS[config.algorithm]
    audits = []
    for t in range(config.T):
        batch = data.sample_minibatch(dataset, config.B, streams.sampling(t))
        pos = batch.positions
        subjects = dataset.subjects[pos]
        try:
            peg = per_example_gradients(spec, params, dataset.features[pos],
                                        dataset.labels[pos], subjects)
            g, info = step(config, peg.grads, subjects, streams, t)
            params = apply_update(params, g, config.eta)
        except NonFiniteError as exc:
            raise TrainingError(
                f"user {streams.user}, round {streams.round}, batch {t}: {exc}"
            ) from exc
        audits.append(BatchAudit(
            user=streams.user,
            round=streams.round,
            batch=t,
            algorithm=config.algorithm.value,
            batch_size=batch.size,
            q=batch.q,
            loss=float(peg.losses.mean()),
            **info,
        ))
    return params, audits


def _bind(algorithm: Algorithm):
    def trainer(config, spec, params, dataset, streams):
        if config.algorithm is not algorithm:
            raise ValueError(f"config is for {config.algorithm.value}, not {algorithm.value}")
        return train_local(config, spec, params, dataset, streams)

    trainer.__name__ = f"train_{algorithm.value}"
    trainer.__doc__ = f"``train_local`` restricted to {algorithm.value} configs."
    return trainer


train_fedavg_local = _bind(Algorithm.FEDAVG)
train_local_item_dp = _bind(Algorithm.LOCAL_ITEM_DP)
train_local_group_dp = _bind(Algorithm.LOCAL_GROUP_DP)
train_higradavg_dp = _bind(Algorithm.HIGRADAVG_DP)
train_userldp = _bind(Algorithm.USERLDP)
