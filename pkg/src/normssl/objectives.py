"""BYOL prediction loss, InfoNCE, and cosine similarity."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, clamp_min, concat, div, getitem, l2_norm, logsumexp, matmul, mean, mul, neg, tsum, add

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class LossValue:
    loss: Tensor
    positive: float | None = None
    negative: float | None = None
    alignment: float | None = None

    def item(self) -> float:
        return self.loss.item()


def _unit(x: Tensor) -> Tensor:
    norms = l2_norm(x, axis=-1, keepdims=True)
    if (norms.data <= NORM_FLOOR).any():
        log.warning("zero-norm vector in cosine similarity; norm floored at %g", NORM_FLOOR)
    return div(x, clamp_min(norms, NORM_FLOOR))


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity of two (B, D) batches, norms floored at 1e-12."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return tsum(mul(_unit(a), _unit(b)), axis=-1)


def byol_loss(q_out, target_z) -> LossValue:
    """Mean negative cosine between online predictions and target projections."""
    target_z = as_tensor(target_z)
    if target_z.requires_grad:
        raise ValueError("byol_loss: target projections must be detached")
    cos = cosine_similarity(q_out, target_z)
    loss = neg(mean(cos))
    return LossValue(loss, alignment=float(cos.data.mean()))


def infonce_loss(z, z_prime, tau: float) -> LossValue:
    """Symmetrized InfoNCE over two (B, D) batches of projections.

    For anchor ``z[i]`` the positive is ``z_prime[i]`` and the log-sum-exp runs
    over every projection of both views except ``z[i]`` itself, so it includes
    the positive. Likewise with the roles of the views swapped. The loss and
    both terms are means over all 2B anchors.
    """
    if tau <= 0:
        raise ValueError("infonce_loss: tau must be positive")
    z, z_prime = as_tensor(z), as_tensor(z_prime)
    if z.shape != z_prime.shape or z.ndim != 2:
        raise ValueError(f"infonce_loss: need two equal (B, D) batches, got {z.shape} and {z_prime.shape}")
    b = z.shape[0]
    u = _unit(concat([z, z_prime], axis=0))
    sims = div(matmul(u, u.T), tau)  # (2B, 2B)
    rows = np.arange(2 * b)
    partner = np.concatenate([rows[b:], rows[:b]])
    others = np.array([[j for j in range(2 * b) if j != i] for i in range(2 * b)], dtype=np.int64).reshape(2 * b, 2 * b - 1)
    pos = getitem(sims, (rows, partner))
    negs = getitem(sims, (rows[:, None], others))
    lse = logsumexp(negs, axis=1)
    pos_term = neg(mean(pos))
    neg_term = mean(lse)
    loss = add(pos_term, neg_term)
    return LossValue(loss, positive=pos_term.item(), negative=neg_term.item())
