"""Classification, divergence and contrastive losses.

Contrastive losses share one masked core.  For anchors ``Za`` and a bank
``Zb`` the scores are ``S = Za @ Zb.T / tau`` and each anchor ``i`` costs

    -1/|P_i| * sum_{p in P_i} S_ip  +  log sum_{a in A_i} exp(S_ia)

which is the log-ratio form with the positive sum kept outside the log.  The
returned value is a plain sum over anchors; dividing by the anchor count is
left to the trainer.

Peer-anchor losses (``contrastive_self``, ``contrastive_sup``) contrast each
row of a multiview batch against every other row.  ``afa_loss`` contrasts
adversarial anchors against the whole clean multiview batch, which by default
includes the anchor's own clean counterpart as a positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, get_default_dtype, take

__all__ = [
    "LossConfig",
    "ContrastiveBatch",
    "EmptyPositiveSetError",
    "cross_entropy",
    "kl_divergence",
    "contrastive_self",
    "contrastive_sup",
    "afa_loss",
    "trades_objective",
    "afa_objective",
    "joint_loss",
    "masked_contrastive",
]


class EmptyPositiveSetError(ValueError):
    def __init__(self, anchor: int, loss: str):
        self.anchor = int(anchor)
        super().__init__(f"{loss}: anchor {anchor} has no positives")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 2.0
    beta: float = 6.0
    joint_afa_weight: float = 0.1
    afa_exclude_self: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda coefficients must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 cannot both be zero")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.joint_afa_weight < 0:
            raise ValueError("joint_afa_weight must be non-negative")


@dataclass(frozen=True)
class ContrastiveBatch:
    """Row bookkeeping for a multiview batch of ``k`` views of ``n`` sources."""

    labels: np.ndarray
    source_index: np.ndarray
    view_index: np.ndarray | None = None
    anchor_mask: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        source = np.asarray(self.source_index, dtype=np.int64)
        if labels.ndim != 1 or labels.shape != source.shape:
            raise ShapeError("ContrastiveBatch", [labels.shape, source.shape], "labels/source_index")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source_index", source)
        if self.anchor_mask is not None:
            mask = np.asarray(self.anchor_mask, dtype=bool)
            if mask.shape != labels.shape:
                raise ShapeError("ContrastiveBatch", [mask.shape, labels.shape], "anchor_mask")
            object.__setattr__(self, "anchor_mask", mask)

    def __len__(self) -> int:
        return len(self.labels)

    def anchors(self) -> np.ndarray:
        if self.anchor_mask is None:
            return np.arange(len(self))
        return np.flatnonzero(self.anchor_mask)


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def _onehot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("cross_entropy", [labels.shape], "labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((len(labels), num_classes), dtype=get_default_dtype())
    out[np.arange(len(labels)), labels] = 1
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError("cross_entropy", [logits.shape, np.shape(labels)])
    onehot = _onehot(labels, logits.shape[1])
    return -(logits.log_softmax() * onehot).sum() * (1.0 / len(onehot))


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch mean of KL(softmax(p) || softmax(q))."""
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError("kl_divergence", [p_logits.shape, q_logits.shape])
    logp = p_logits.log_softmax()
    diff = logp - q_logits.log_softmax()
    return (logp.exp() * diff).sum() * (1.0 / p_logits.shape[0])


# ---------------------------------------------------------------------------
# contrastive losses
# ---------------------------------------------------------------------------

def masked_contrastive(za: Tensor, zb: Tensor, contrast: np.ndarray, positive: np.ndarray,
                       tau: float, name: str = "contrastive") -> Tensor:
    """Sum over anchors of the log-ratio loss with boolean masks over the bank."""
    if za.ndim != 2 or zb.ndim != 2 or za.shape[1] != zb.shape[1]:
        raise ShapeError(name, [za.shape, zb.shape], "embedding widths differ")
    shape = (za.shape[0], zb.shape[0])
    if contrast.shape != shape or positive.shape != shape:
        raise ShapeError(name, [contrast.shape, positive.shape], f"masks must be {shape}")
    if (positive & ~contrast).any():
        raise ValueError(f"{name}: positives must lie inside the contrastive view")
    counts = positive.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyPositiveSetError(empty[0], name)
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"{name}: tau must be positive and finite")

    dtype = get_default_dtype()
    scores = (za @ zb.T) * (1.0 / tau)
    view = contrast.astype(dtype)
    # shift by the (constant) masked row maximum; entries outside the view are
    # zeroed before exp and then dropped by the mask
    shift = np.where(contrast, scores.data, -np.inf).max(axis=1, keepdims=True)
    lse = (((scores - shift) * view).exp() * view).sum(axis=1).log() + shift[:, 0]
    weights = positive.astype(dtype) / counts[:, None].astype(dtype)
    pos = (scores * weights).sum(axis=1)
    return (lse - pos).sum()


def _peer_masks(batch: ContrastiveBatch, key: np.ndarray):
    rows = batch.anchors()
    n = len(batch)
    contrast = np.ones((len(rows), n), dtype=bool)
    contrast[np.arange(len(rows)), rows] = False
    positive = (key[rows][:, None] == key[None, :]) & contrast
    return rows, contrast, positive


def _check_rows(z: Tensor, batch: ContrastiveBatch, name: str):
    if z.ndim != 2 or z.shape[0] != len(batch):
        raise ShapeError(name, [z.shape], f"expected {len(batch)} embedding rows")


def contrastive_self(z: Tensor, batch: ContrastiveBatch, tau: float = 0.5) -> Tensor:
    """Self-supervised loss: positives are the other views of the same source."""
    _check_rows(z, batch, "contrastive_self")
    rows, contrast, positive = _peer_masks(batch, batch.source_index)
    za = z if len(rows) == len(batch) else _take_rows(z, rows)
    return masked_contrastive(za, z, contrast, positive, tau, "contrastive_self")


def contrastive_sup(z: Tensor, batch: ContrastiveBatch, tau: float = 0.5) -> Tensor:
    """Supervised loss: positives are every other row sharing the label."""
    _check_rows(z, batch, "contrastive_sup")
    rows, contrast, positive = _peer_masks(batch, batch.labels)
    za = z if len(rows) == len(batch) else _take_rows(z, rows)
    return masked_contrastive(za, z, contrast, positive, tau, "contrastive_sup")


def afa_loss(z_adv: Tensor, z_clean: Tensor, batch: ContrastiveBatch, counterpart=None,
             tau: float = 0.5, exclude_self: bool = False) -> Tensor:
    """Adversarial anchors contrasted against the full clean multiview bank.

    ``batch`` describes the clean rows.  ``counterpart[i]`` is the clean row
    that anchor ``i`` perturbs (default: anchor ``i`` perturbs clean row ``i``).
    The counterpart stays in both the contrastive view and the positive set
    unless ``exclude_self`` is set.
    """
    _check_rows(z_clean, batch, "afa_loss")
    n = len(batch)
    if counterpart is None:
        counterpart = np.arange(z_adv.shape[0])
    counterpart = np.asarray(counterpart, dtype=np.int64)
    if z_adv.ndim != 2 or counterpart.shape != (z_adv.shape[0],):
        raise ShapeError("afa_loss", [z_adv.shape, counterpart.shape], "one counterpart per anchor")
    if counterpart.size and (counterpart.min() < 0 or counterpart.max() >= n):
        raise ValueError("afa_loss: counterpart index out of range")
    contrast = np.ones((len(counterpart), n), dtype=bool)
    if exclude_self:
        contrast[np.arange(len(counterpart)), counterpart] = False
    positive = (batch.labels[counterpart][:, None] == batch.labels[None, :]) & contrast
    return masked_contrastive(z_adv, z_clean, contrast, positive, tau, "afa_loss")


def _take_rows(z: Tensor, rows: np.ndarray) -> Tensor:
    return take(z, rows)


# ---------------------------------------------------------------------------
# composite objectives
# ---------------------------------------------------------------------------

def trades_objective(model, x, x_adv, y, beta: float = 6.0, logits_clean: Tensor | None = None) -> Tensor:
    """``CE(f(x), y) + beta * KL(f(x) || f(x_adv))``."""
    if np.shape(x) != np.shape(x_adv):
        raise ShapeError("trades_objective", [np.shape(x), np.shape(x_adv)])
    nat = model.logits(x) if logits_clean is None else logits_clean
    loss = cross_entropy(nat, y)
    if beta == 0:
        return loss
    return loss + beta * kl_divergence(nat, model.logits(x_adv))


def afa_objective(z_clean: Tensor, batch: ContrastiveBatch, z_adv: Tensor, counterpart=None,
                  cfg: LossConfig = LossConfig()) -> Tensor:
    """``lambda1 * L_sup(clean) + lambda2 * L_AFA(adv vs clean)``; zero-weight terms are skipped."""
    terms = []
    if cfg.lambda1:
        terms.append(cfg.lambda1 * contrastive_sup(z_clean, batch, cfg.tau))
    if cfg.lambda2:
        terms.append(cfg.lambda2 * afa_loss(z_adv, z_clean, batch, counterpart, cfg.tau,
                                            cfg.afa_exclude_self))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def joint_loss(trades_value, afa_value, weight: float = 0.1):
    """``trades + weight * afa`` for tensors or plain floats."""
    for name, v in (("trades", trades_value), ("afa", afa_value)):
        data = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.isfinite(data).all():
            raise NonFiniteError("joint_loss", name)
    if weight == 0:
        return trades_value
    return trades_value + weight * afa_value
