"""Front-door estimation over the knowledge queue and the three CCM losses.

Shapes used throughout: ``N`` batch rows, ``m`` queue entries, ``d`` feature
width, ``C`` classes. Probability tables follow these layouts:

* ``p_x``         -- (N,)       distribution over batch elements
* ``p_z_given_x`` -- (N, m)     row j is a distribution over queue entries
* ``p_y_given_zx``-- (m, N, C)  slice [i, j] is a class distribution
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, QueueError, ShapeError
from .nets import MLP

PROB_FLOOR = 1e-12


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def similarity_matrix(a, b, tau: float) -> Tensor:
    """Pairwise contrastive similarity between rows of ``a`` (n x d) and ``b`` (m x d).

    ``cos(a_i, b_k) / (tau * sqrt(d))``; zero rows give zero similarity.
    """
    a, b = _t(a), _t(b)
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}", "tau")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("similarity_matrix", a.shape, b.shape)
    d = a.shape[1]
    cos = ad.matmul(ad.l2_normalize(a), ad.transpose(ad.l2_normalize(b)))
    return ad.scale(cos, 1.0 / (tau * math.sqrt(d)))


def contrastive_similarity(q, k, tau: float) -> float:
    q = np.asarray(getattr(q, "data", q), dtype=np.float64).reshape(1, -1)
    k = np.asarray(getattr(k, "data", k), dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        return similarity_matrix(q, k, tau).item()


# ---------------------------------------------------------------- factors


def p_x(features, tau: float, training: bool = True) -> Tensor:
    """Batch-element distribution.

    Training: softmax over the batch of each row's summed similarity to the
    whole batch (self term included). Inference: uniform ``1/N``.
    """
    f = _t(features)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ShapeError("p_x", f.shape, detail="need a non-empty N x d batch")
    n = f.shape[0]
    if not training:
        return Tensor(np.full(n, 1.0 / n))
    s = ad.sum(similarity_matrix(f, f, tau), axis=1)
    return ad.softmax(s, axis=0)


def p_z_given_x(queue_feats, sample_feats, tau: float) -> Tensor:
    """Per-sample distribution over queue entries, softmax of similarities.

    ``sample_feats`` may be one d-vector (returns an m-vector) or an N x d
    batch (returns N x m).
    """
    zq = _t(queue_feats)
    if zq.ndim != 2 or zq.shape[0] == 0:
        raise QueueError("p_z_given_x needs a non-empty queue")
    f = _t(sample_feats)
    single = f.ndim == 1
    if single:
        f = ad.reshape(f, (1, -1))
    p = ad.softmax(similarity_matrix(f, zq, tau), axis=1)
    return ad.reshape(p, (zq.shape[0],)) if single else p


def batch_p_z(queue_feats, sample_feats, tau: float) -> np.ndarray:
    """Single batch-level distribution over the queue (diagnostic only).

    Sums the per-sample softmax over the batch and L1-normalizes, i.e. the
    mean of the rows of :func:`p_z_given_x`.
    """
    with ad.no_grad():
        rows = p_z_given_x(queue_feats, sample_feats, tau).data
    col = rows.sum(axis=0)
    return col / np.abs(col).sum()


def pair_logits(H: MLP, G: MLP, queue_feats, sample_feats) -> Tensor:
    """``G(concat(H(z_i), H(f_j)))`` for every (queue entry, sample) pair, m x N x C."""
    zq, f = _t(queue_feats), _t(sample_feats)
    if zq.ndim != 2 or f.ndim != 2 or zq.shape[1] != f.shape[1]:
        raise ShapeError("p_y_given_zx", zq.shape, f.shape)
    if G.spec.in_dim != 2 * H.spec.out_dim:
        raise ShapeError("p_y_given_zx", (G.spec.in_dim,), (2 * H.spec.out_dim,),
                         detail="G input must equal two projector outputs")
    m, n = zq.shape[0], f.shape[0]
    hz, hx = H(zq), H(f)
    h = hz.shape[1]
    left = ad.broadcast_to(ad.reshape(hz, (m, 1, h)), (m, n, h))
    right = ad.broadcast_to(ad.reshape(hx, (1, n, h)), (m, n, h))
    pairs = ad.reshape(ad.concat([left, right], axis=2), (m * n, 2 * h))
    return ad.reshape(G(pairs), (m, n, G.spec.out_dim))


def p_y_given_zx(H: MLP, G: MLP, queue_feats, sample_feats) -> Tensor:
    return ad.softmax(pair_logits(H, G, queue_feats, sample_feats), axis=2)


@dataclass
class FrontDoorFactors:
    p_x: np.ndarray
    p_z_given_x: np.ndarray
    p_y_given_zx: np.ndarray

    def __post_init__(self):
        self.p_x = np.asarray(getattr(self.p_x, "data", self.p_x), dtype=np.float64)
        self.p_z_given_x = np.asarray(getattr(self.p_z_given_x, "data", self.p_z_given_x), dtype=np.float64)
        self.p_y_given_zx = np.asarray(getattr(self.p_y_given_zx, "data", self.p_y_given_zx), dtype=np.float64)
        n, m = self.p_z_given_x.shape
        if self.p_x.shape != (n,) or self.p_y_given_zx.shape[:2] != (m, n):
            raise ShapeError("FrontDoorFactors", self.p_x.shape, self.p_z_given_x.shape,
                             self.p_y_given_zx.shape)

    def check(self, tol: float = 1e-9) -> None:
        for name, arr, axis in (
            ("p_x", self.p_x, 0),
            ("p_z_given_x", self.p_z_given_x, 1),
            ("p_y_given_zx", self.p_y_given_zx, 2),
        ):
            if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=axis) - 1.0) > tol):
                raise DomainError("FrontDoorFactors", f"{name} is not normalized")


def front_door(factors: FrontDoorFactors, sample_index: int) -> np.ndarray:
    """Interventional class distribution for one batch element.

    ``sum_i P(z_i | x_j) * sum_j' P(x_j') * P(y | z_i, x_j')``
    """
    n = factors.p_x.shape[0]
    if not 0 <= sample_index < n:
        raise DomainError("front_door", f"sample_index {sample_index} outside [0, {n})")
    mixed = np.einsum("j,ijc->ic", factors.p_x, factors.p_y_given_zx)
    return factors.p_z_given_x[sample_index] @ mixed


def front_door_batch(px: Tensor, pzx: Tensor, pyzx: Tensor) -> Tensor:
    """Differentiable front-door outputs for the whole batch, N x C."""
    n = px.shape[0]
    weighted = ad.mul(pyzx, ad.reshape(px, (1, n, 1)))
    mixed = ad.sum(weighted, axis=1)  # m x C
    return ad.matmul(pzx, mixed)


def front_door_independent(pzx: np.ndarray, pyzx: np.ndarray) -> np.ndarray:
    """Front-door outputs when every sample is its own batch (P(X=x) = 1).

    Row j equals :func:`front_door` on the singleton batch {x_j}.
    """
    return np.einsum("ji,ijc->jc", pzx, pyzx)


# ---------------------------------------------------------------- losses


def _labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError("labels", y.shape, (n,))
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise DomainError("labels", f"class id outside [0, {num_classes})")
    return y


def l_teach(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of the classifier over one domain's batch."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError("l_teach", logits.shape, detail="need a non-empty N x C batch")
    y = _labels(labels, logits.shape[0], logits.shape[1])
    return ad.neg(ad.mean(ad.pick(ad.log_softmax(logits, axis=1), y)))


def l_learn(fd_outputs: Tensor, labels) -> tuple[Tensor, int]:
    """Mean ``-log`` front-door probability of the true class.

    Returns the loss and how many probabilities were clamped at the floor.
    """
    fd = _t(fd_outputs)
    y = _labels(labels, fd.shape[0], fd.shape[1])
    return ad.cross_entropy(fd, y, PROB_FLOOR)


def l_cs(query_feats, queue_feats, queue_labels, labels, tau: float) -> Tensor:
    """Supervised contrastive loss of batch queries against queue keys.

    Every (sample, same-label queue entry) pair contributes the negative
    log-softmax of its similarity over the whole queue; the total is divided
    by the number of such pairs. No pairs means a loss of exactly 0.
    """
    f = _t(query_feats)
    zq = np.asarray(getattr(queue_feats, "data", queue_feats), dtype=np.float64)
    if zq.ndim != 2 or zq.shape[0] == 0:
        raise QueueError("l_cs needs a non-empty queue")
    yq = np.asarray(queue_labels, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (f.shape[0],) or yq.shape != (zq.shape[0],):
        raise ShapeError("l_cs", y.shape, yq.shape)
    pos = (y[:, None] == yq[None, :]).astype(np.float64)
    n_pair = pos.sum()
    if n_pair == 0:
        return Tensor(0.0)
    logp = ad.log_softmax(similarity_matrix(f, Tensor(zq), tau), axis=1)
    return ad.scale(ad.sum(ad.mul(logp, Tensor(pos))), -1.0 / n_pair)


@dataclass
class LossBreakdown:
    l_teach: float
    l_learn: float
    l_cs: float
    l_all: float
    enabled: tuple[bool, bool, bool]
    total: Tensor | None = field(default=None, repr=False, compare=False)


def l_all(terms, enabled=(True, True, True)) -> LossBreakdown:
    """Unit-weight sum of the enabled ``(teach, learn, cs)`` terms.

    Terms may be floats or scalar tensors; ``None`` stands for a term that was
    skipped (e.g. the queue was still empty) and counts as 0.
    """
    enabled = tuple(bool(e) for e in enabled)
    if len(terms) != 3 or len(enabled) != 3:
        raise ConfigError("expected three terms and three flags")
    if not any(enabled):
        raise ConfigError("at least one loss term must be enabled", "loss_flags")
    total = None
    values = []
    for term, on in zip(terms, enabled):
        if not on or term is None:
            values.append(0.0)
            continue
        t = _t(term)
        values.append(t.item())
        total = t if total is None else ad.add(total, t)
    if total is None:
        total = Tensor(0.0)
    return LossBreakdown(values[0], values[1], values[2], float(total.item()), enabled, total)
