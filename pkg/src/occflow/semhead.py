"""Shared semantic prototypes, hard-point sampling and the Dice+BCE losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng

EMPTY = 255
DICE_EPS = 1.0
PRIOR_CLAMP = (1.0, 100.0)


@dataclass
class PrototypeBank:
    """``C`` class prototypes plus the empty embedding (last row).

    ``mlp`` is ``(W1, b1, W2, b2)`` encoding prototypes as
    ``sigmoid(P W1 + b1) W2 + b2``; ``None`` uses the raw prototypes.
    """
    prototypes: ng.Tensor
    mlp: tuple | None = None

    def __post_init__(self):
        self.prototypes = ng.as_tensor(self.prototypes)
        if self.prototypes.data.ndim != 2 or self.prototypes.shape[0] < 2:
            raise ValueError("prototype bank needs (C+1, F) rows")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0] - 1

    @property
    def empty_index(self) -> int:
        return self.n_classes

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def random(cls, n_classes: int, dim: int, rng: np.random.Generator,
               with_mlp: bool = True, scale: float = 1.0) -> "PrototypeBank":
        protos = ng.Tensor(rng.normal(0, scale, (n_classes + 1, dim)), requires_grad=True)
        mlp = None
        if with_mlp:
            mlp = (ng.Tensor(rng.normal(0, 1 / np.sqrt(dim), (dim, dim)), requires_grad=True),
                   ng.Tensor(np.zeros(dim), requires_grad=True),
                   ng.Tensor(rng.normal(0, 1 / np.sqrt(dim), (dim, dim)), requires_grad=True),
                   ng.Tensor(np.zeros(dim), requires_grad=True))
        return cls(protos, mlp)

    def parameters(self) -> list[ng.Tensor]:
        return [self.prototypes, *(self.mlp or ())]

    def encoded(self) -> ng.Tensor:
        if self.mlp is None:
            return self.prototypes
        w1, b1, w2, b2 = self.mlp
        hidden = ng.sigmoid(ng.add(ng.matmul(self.prototypes, w1), b1))
        return ng.add(ng.matmul(hidden, w2), b2)


def class_logits(features, bank: PrototypeBank, classes=None) -> ng.Tensor:
    """Logits ``(N, len(classes))``: inner products of features with encoded prototypes.

    ``classes`` indexes bank rows (the empty embedding is ``bank.empty_index``);
    ``None`` means every row.
    """
    features = ng.as_tensor(features)
    if features.data.ndim != 2 or features.shape[1] != bank.dim:
        raise ValueError(f"feature dim {features.shape} does not match bank dim {bank.dim}")
    enc = bank.encoded()
    if classes is not None:
        enc = ng.gather(enc, np.asarray(classes, dtype=np.int64))
    n, f = features.shape
    prod = ng.mul(ng.reshape(features, (n, 1, f)), ng.reshape(enc, (1, enc.shape[0], f)))
    return ng.sum(prod, axis=-1)


def present_classes(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Boolean presence mask over the ``n_classes`` semantic classes."""
    labels = np.asarray(labels).reshape(-1)
    mask = np.zeros(n_classes, dtype=bool)
    ids = labels[labels != EMPTY]
    mask[np.unique(ids).astype(np.int64)] = True
    return mask


def loss_classes(present: np.ndarray, empty_index: int) -> np.ndarray:
    """Bank rows that take part in the loss: present classes plus empty."""
    return np.concatenate([np.nonzero(present)[0], [empty_index]]).astype(np.int64)


def one_hot_targets(labels: np.ndarray, classes: np.ndarray, empty_index: int) -> np.ndarray:
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    lab = np.where(lab == EMPTY, empty_index, lab)
    return (lab[:, None] == np.asarray(classes)[None, :]).astype(np.float64)


@dataclass
class SamplingPlan:
    K: int
    scores: np.ndarray
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def _rank_fraction(values: np.ndarray) -> np.ndarray:
    """Rank of each value in ``(0, 1]``; equal values share the highest rank."""
    n = values.size
    order = np.sort(values)
    return np.searchsorted(order, values, side="right") / n


def uncertainty_sample(logits, labels, K: int, n_classes: int | None = None,
                       seed: int | None = None) -> SamplingPlan:
    """Pick ``K`` hard points by boundary proximity weighted by class rarity.

    Uncertainty is ``-min_c |logit|`` turned into a rank fraction, then
    multiplied by the inverse in-sample frequency of the point's label
    clamped to ``[1, 100]``.  Ties go to the lower flat index; when every
    point is equally uncertain the tie order is permuted by ``seed``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    lg = ng.as_tensor(logits).data
    lab = np.asarray(labels).reshape(-1)
    n = lg.shape[0]
    if lab.size != n:
        raise ValueError("labels and logits disagree on point count")
    unc = -np.abs(lg).min(axis=1) if lg.shape[1] else np.zeros(n)
    rank = _rank_fraction(unc)
    _, inv, counts = np.unique(lab, return_inverse=True, return_counts=True)
    prior = np.clip(n / counts[inv].astype(np.float64), *PRIOR_CLAMP)
    score = rank * prior
    tie_key = np.arange(n)
    if seed is not None and np.all(unc == unc[0]):
        tie_key = np.random.default_rng(seed).permutation(n)
    take = min(K, n)
    order = np.lexsort((tie_key, -score))
    return SamplingPlan(K, score, np.sort(order[:take]))


def dice_bce_terms(logits, targets) -> tuple[ng.Tensor, ng.Tensor]:
    """Mean per-class Dice loss and mean binary cross-entropy."""
    logits = ng.as_tensor(logits)
    q = np.asarray(targets, dtype=np.float64)
    if logits.shape != q.shape:
        raise ValueError(f"logits {logits.shape} and targets {q.shape} differ")
    if logits.shape[0] == 0:
        raise ValueError("no sampled points")
    p = ng.sigmoid(logits)
    inter = ng.sum(ng.mul(p, q), axis=0)
    denom = ng.add(ng.sum(p, axis=0), q.sum(axis=0) + DICE_EPS)
    ratio = ng.mul(ng.add(ng.mul(inter, 2.0), DICE_EPS), ng.reciprocal(denom))
    dice = ng.mean(ng.add(ng.mul(ratio, -1.0), 1.0))
    # log(1 - sigmoid(x)) == log(sigmoid(-x))
    log_p = ng.log(p)
    log_np = ng.log(ng.sigmoid(ng.mul(logits, -1.0)))
    bce = ng.mul(ng.mean(ng.add(ng.mul(log_p, q), ng.mul(log_np, 1.0 - q))), -1.0)
    return dice, bce


def dice_bce_loss(logits, targets, alpha: float = 5.0, beta: float = 20.0) -> ng.Tensor:
    """``alpha * Dice + beta * BCE`` over sampled points and participating classes.

    ``logits`` and ``targets`` are ``(N, Cp)`` restricted to the present
    classes plus empty (see :func:`loss_classes`).
    """
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    dice, bce = dice_bce_terms(logits, targets)
    return ng.add(ng.mul(dice, alpha), ng.mul(bce, beta))


def semantic_loss(features, labels, bank: PrototypeBank, K: int, alpha: float = 5.0,
                  beta: float = 20.0, seed: int | None = None,
                  plan: SamplingPlan | None = None) -> tuple[ng.Tensor, SamplingPlan]:
    """Conditional, sampled Dice+BCE loss of point features against labels.

    Only classes present in ``labels`` (plus empty) get logits; the loss is
    evaluated on the ``K`` points chosen by :func:`uncertainty_sample`, or on
    ``plan`` when one is given.  Used for both the voxel loss and the
    auxiliary image-plane loss.
    """
    features = ng.as_tensor(features)
    labels = np.asarray(labels).reshape(-1)
    if labels.size != features.shape[0]:
        raise ValueError("labels do not match feature rows")
    present = present_classes(labels, bank.n_classes)
    classes = loss_classes(present, bank.empty_index)
    if plan is None:
        frozen = ng.Tensor(features.data)
        plan_logits = class_logits(frozen, _detached(bank), classes)
        plan = uncertainty_sample(plan_logits, labels, K, seed=seed)
    sampled = ng.gather(features, plan.selected)
    logits = class_logits(sampled, bank, classes)
    targets = one_hot_targets(labels[plan.selected], classes, bank.empty_index)
    return dice_bce_loss(logits, targets, alpha, beta), plan


def _detached(bank: PrototypeBank) -> PrototypeBank:
    mlp = None if bank.mlp is None else tuple(ng.Tensor(t.data) for t in bank.mlp)
    return PrototypeBank(ng.Tensor(bank.prototypes.data), mlp)


def loss_3d(voxel_features, labels, bank, K, alpha=5.0, beta=20.0, seed=None) -> ng.Tensor:
    return semantic_loss(voxel_features, labels, bank, K, alpha, beta, seed)[0]


def aux_2d_loss(pixel_features, masks, bank, K, alpha=5.0, beta=20.0, seed=None) -> ng.Tensor:
    """Image-plane counterpart of :func:`loss_3d` using the same prototypes.

    Pixels whose mask is ``EMPTY`` (rays that hit nothing) count as empty.
    """
    return semantic_loss(pixel_features, masks, bank, K, alpha, beta, seed)[0]


def infer_labels(features, bank: PrototypeBank) -> np.ndarray:
    """Per-point argmax over all classes and the empty embedding.

    Ties resolve to the lowest class index; the empty winner maps to ``EMPTY``.
    """
    logits = class_logits(ng.Tensor(ng.as_tensor(features).data), _detached(bank)).data
    best = np.argmax(logits, axis=1)
    return np.where(best == bank.empty_index, EMPTY, best).astype(np.uint8)
