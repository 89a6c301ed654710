"""Small differentiable models with analytic per-example gradients.

Parameters live in one flat float64 vector; ``ModelSpec.layout`` names the
segments. Two model kinds are supported: multinomial logistic regression
(convex) and a one-hidden-layer tanh MLP.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import log_softmax

from .data import SubjectDataset

LOGISTIC = "logistic_regression"
MLP = "mlp"

CHECKPOINT_SCHEMA = "subjectdp.checkpoint/1"


class NonFiniteError(FloatingPointError):
    pass


class Segment(NamedTuple):
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``logistic_regression`` has no intercept unless ``bias`` is set; append a
    constant feature instead if one is wanted. ``mlp`` always has biases.
    """

    kind: str
    d_in: int
    num_classes: int
    hidden: tuple[int, ...] = ()
    bias: bool = False
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.kind not in (LOGISTIC, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == MLP and not self.hidden:
            object.__setattr__(self, "hidden", (32,))
        if self.kind == MLP and len(self.hidden) != 1:
            raise ValueError("mlp supports exactly one hidden layer")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def convex(self) -> bool:
        return self.kind == LOGISTIC

    @property
    def layout(self) -> list[Segment]:
        c, d = self.num_classes, self.d_in
        if self.kind == LOGISTIC:
            shapes = [("W", (c, d))] + ([("b", (c,))] if self.bias else [])
        else:
            h = self.hidden[0]
            shapes = [("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,))]
        segments, offset = [], 0
        for name, shape in shapes:
            segments.append(Segment(name, offset, shape))
            offset += math.prod(shape)
        return segments

    @property
    def dim(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        if params.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} parameters, got shape {params.shape}")
        return {
            s.name: params[s.offset : s.offset + s.size].reshape(s.shape)
            for s in self.layout
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def init_params(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zeros for logistic regression, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for the MLP."""
    params = np.zeros(spec.dim)
    if spec.kind == LOGISTIC:
        return params
    if rng is None:
        raise ValueError("mlp initialisation needs an rng")
    for seg in spec.layout:
        fan_in = spec.d_in if seg.name in ("W1", "b1") else spec.hidden[0]
        bound = 1.0 / math.sqrt(fan_in)
        params[seg.offset : seg.offset + seg.size] = rng.uniform(-bound, bound, seg.size)
    return params


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _logits(spec: ModelSpec, p: dict, X: np.ndarray):
    if spec.kind == LOGISTIC:
        z = X @ p["W"].T
        if spec.bias:
            z = z + p["b"]
        return z, None
    h = np.tanh(X @ p["W1"].T + p["b1"])
    return h @ p["W2"].T + p["b2"], h


def predict_logits(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _logits(spec, spec.unpack(params), np.asarray(X, dtype=np.float64))[0]


def losses(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy."""
    z = predict_logits(spec, params, X)
    return -log_softmax(z, axis=1)[np.arange(len(y)), y]


class PerExampleGradients(NamedTuple):
    """Row i holds the gradient and loss of item i of the batch."""

    grads: np.ndarray
    losses: np.ndarray
    subjects: np.ndarray


def per_example_gradients(
    spec: ModelSpec,
    params: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    subjects: np.ndarray | None = None,
) -> PerExampleGradients:
    """Analytic cross-entropy gradients, one row per item.

    Raises:
      NonFiniteError: some gradient or loss is not finite; names the item.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != spec.d_in:
        raise ValueError(f"expected inputs of shape (n, {spec.d_in}), got {X.shape}")
    p = spec.unpack(params)
    # Non-finite values are detected and reported below.
    with np.errstate(all="ignore"):
        grads, loss = _per_example(spec, p, X, y)
    bad = ~(np.isfinite(loss) & np.isfinite(grads).all(axis=1))
    if bad.any():
        raise NonFiniteError(f"non-finite gradient for batch item {int(np.flatnonzero(bad)[0])}")
    if subjects is None:
        subjects = np.full(len(y), -1, dtype=np.int64)
    return PerExampleGradients(grads, loss, np.asarray(subjects))


def _per_example(spec: ModelSpec, p: dict, X: np.ndarray, y: np.ndarray):
    z, h = _logits(spec, p, X)
    logp = log_softmax(z, axis=1)
    n = len(y)
    loss = -logp[np.arange(n), y]
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0  # dL/dz

    grads = np.empty((n, spec.dim))
    if spec.kind == LOGISTIC:
        c, d = spec.num_classes, spec.d_in
        grads[:, : c * d] = (delta[:, :, None] * X[:, None, :]).reshape(n, c * d)
        if spec.bias:
            grads[:, c * d :] = delta
    else:
        segs = {s.name: s for s in spec.layout}
        dh = (delta @ p["W2"]) * (1.0 - h * h)

        def put(name, value):
            s = segs[name]
            grads[:, s.offset : s.offset + s.size] = value.reshape(n, s.size)

        put("W1", dh[:, :, None] * X[:, None, :])
        put("b1", dh)
        put("W2", delta[:, :, None] * h[:, None, :])
        put("b2", delta)
    return grads, loss


def batch_gradient(spec: ModelSpec, params: np.ndarray, X, y) -> np.ndarray:
    """Gradient of the mean loss over the batch."""
    return per_example_gradients(spec, params, X, y).grads.mean(axis=0)


# ---------------------------------------------------------------------------
# Clipping and updates
# ---------------------------------------------------------------------------

# Vectors within this relative margin of C are left alone, which makes clipping
# exactly idempotent despite rounding in the rescaled norm.
_CLIP_SLACK = 1e-12


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Scales ``g`` to L2 norm at most C, preserving direction."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError(f"expected a vector, got shape {g.shape}")
    clipped, norms = clip_rows(g[None, :], C)
    return g if norms[0] <= C * (1 + _CLIP_SLACK) else clipped[0]


def clip_rows(G: np.ndarray, C: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``clip``; returns the clipped rows and their pre-clip norms."""
    if not C > 0:
        raise ValueError(f"clipping threshold must be > 0, got {C}")
    norms = np.linalg.norm(G, axis=1)
    scale = np.where(norms > C * (1 + _CLIP_SLACK), C / np.where(norms > 0, norms, 1.0), 1.0)
    return G * scale[:, None], norms


def apply_update(params: np.ndarray, grad_estimate: np.ndarray, eta: float) -> np.ndarray:
    if params.shape != grad_estimate.shape:
        raise ValueError(f"shape mismatch {params.shape} vs {grad_estimate.shape}")
    out = params - eta * grad_estimate
    if not np.isfinite(out).all():
        raise NonFiniteError("parameter update produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class Evaluation(NamedTuple):
    loss: float
    accuracy: float


def evaluate(spec: ModelSpec, params: np.ndarray, dataset: SubjectDataset) -> Evaluation:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    z = predict_logits(spec, params, dataset.features)
    logp = log_softmax(z, axis=1)
    loss = float(-logp[np.arange(len(dataset)), dataset.labels].mean())
    acc = float((z.argmax(axis=1) == dataset.labels).mean())
    return Evaluation(loss, acc)


class LipschitzEstimate(NamedTuple):
    L: float
    method: str


def estimate_lipschitz(spec: ModelSpec, dataset: SubjectDataset) -> LipschitzEstimate:
    """Upper bound on per-example gradient norms of the convex model.

    For softmax cross-entropy the gradient w.r.t. the weights is
    (p - e_y) x^T with ||p - e_y|| <= sqrt(2), so L <= sqrt(2) max ||x||
    (with a 1 appended to x when the model has an intercept).

    Raises:
      ValueError: the model is not convex.
    """
    if not spec.convex:
        raise ValueError("non-convex; bounds not applicable")
    sq = np.einsum("ij,ij->i", dataset.features, dataset.features)
    if spec.bias:
        sq = sq + 1.0
    return LipschitzEstimate(math.sqrt(2.0) * math.sqrt(float(sq.max())), "softmax_feature_norm")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray) -> None:
    """Writes ``<path>.bin`` (little-endian float64) and ``<path>.json`` layout."""
    path = Path(path)
    path.with_suffix(".bin").write_bytes(np.asarray(params, dtype="<f8").tobytes())
    sidecar = {
        "schema": CHECKPOINT_SCHEMA,
        "dtype": "<f8",
        "length": int(spec.dim),
        "model": spec.to_dict(),
        "segments": [
            {"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in spec.layout
        ],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {meta.get('schema')!r}")
    m = meta["model"]
    spec = ModelSpec(m["kind"], m["d_in"], m["num_classes"], tuple(m["hidden"]),
                     m.get("bias", False), m.get("loss", "cross_entropy"))
    params = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    if params.shape != (meta["length"],) or meta["length"] != spec.dim:
        raise ValueError("checkpoint length does not match its layout")
    return spec, params
