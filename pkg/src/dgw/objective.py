"""Losses for the two-branch workspace: CE, GCE, difficulty weights, attention entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Tensor
from .workspace import AttentionRecord

W_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_re: float = 15.0
    lambda_swap_b: float = 15.0
    lambda_swap: float = 1.0
    lambda_ent: float = 0.01
    gce_q: float = 0.7

    def __post_init__(self):
        for name in ("lambda_re", "lambda_swap_b", "lambda_swap", "lambda_ent"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if not 0.0 < self.gce_q <= 1.0:
            raise ContractError(f"gce_q must lie in (0, 1], got {self.gce_q}")


def _labels(logits: Tensor, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    k = logits.shape[-1]
    if k < 2:
        raise ContractError(f"need at least 2 classes, got {k}")
    if y.shape != (logits.shape[0],):
        raise ContractError(f"labels shape {y.shape} does not match logits {logits.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return y


def ce(logits: Tensor, y) -> Tensor:
    """Per-sample cross entropy, shape ``(batch,)``."""
    y = _labels(logits, y)
    return nc.scale(nc.pick(nc.log_softmax(logits, axis=-1), y), -1.0)


def gce(logits: Tensor, y, q: float) -> Tensor:
    """Per-sample generalized cross entropy ``(1 - p_y**q) / q``."""
    if not 0.0 < q <= 1.0:
        raise ContractError(f"q must lie in (0, 1], got {q}")
    y = _labels(logits, y)
    logp = nc.pick(nc.log_softmax(logits, axis=-1), y)
    return nc.scale(1.0 - nc.exp(nc.scale(logp, q)), 1.0 / q)


def difficulty_weight(ce_i, ce_b) -> np.ndarray:
    """Relative difficulty ``ce_b / (ce_i + ce_b + eps)`` as a constant array."""
    ci = np.asarray(ce_i.data if isinstance(ce_i, Tensor) else ce_i, dtype=np.float64)
    cb = np.asarray(ce_b.data if isinstance(ce_b, Tensor) else ce_b, dtype=np.float64)
    if (ci < 0).any() or (cb < 0).any():
        raise ContractError("CE values must be non-negative")
    return cb / (ci + cb + W_EPS)


def mask_entropy(rec: AttentionRecord) -> Tensor:
    """Mean of ``-a log a`` over every entry of the CA mask."""
    logp = nc.log_softmax(rec.ca_logits, axis=-1)
    return nc.scale(nc.reduce_mean(rec.a_ca * logp), -1.0)


def entropy_loss(rec_i: AttentionRecord, rec_b: AttentionRecord) -> Tensor:
    return mask_entropy(rec_i) + mask_entropy(rec_b)


def entropy_of(a: np.ndarray) -> float:
    """Plain-array version of the mask entropy with ``0 log 0 = 0``."""
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(a), 0.0)
    return float(terms.mean())


@dataclass
class ReTerms:
    """Pieces of the re-weighted loss kept for logging and the swap pass."""

    total: Tensor
    ce_i: Tensor
    ce_b: Tensor
    gce_b: Tensor
    weight: np.ndarray
    ent: Tensor | None


def loss_re(logits_i: Tensor, logits_b: Tensor, y, rec_i: AttentionRecord | None,
            rec_b: AttentionRecord | None, w: LossWeights) -> ReTerms:
    """``mean(W * CE_i) + lambda_re * mean(GCE_b) + lambda_ent * L_ent``."""
    ce_i = ce(logits_i, y)
    ce_b = ce(logits_b, y)
    weight = difficulty_weight(ce_i, ce_b)
    g = gce(logits_b, y, w.gce_q)
    total = nc.reduce_mean(nc.mul(nc.stop_gradient(Tensor(weight)), ce_i)) \
        + nc.scale(nc.reduce_mean(g), w.lambda_re)
    ent = None
    if rec_i is not None and rec_b is not None:
        ent = entropy_loss(rec_i, rec_b)
        total = total + nc.scale(ent, w.lambda_ent)
    return ReTerms(total, ce_i, ce_b, g, weight, ent)


def loss_swap(logits_i_swap: Tensor, logits_b_swap: Tensor, y, y_tilde,
              weight: np.ndarray, w: LossWeights) -> Tensor:
    """``mean(W * CE_i(swap, y)) + lambda_swap_b * mean(GCE_b(swap, y_tilde))``.

    ``weight`` comes from the unswapped pass and is held constant.
    """
    ce_i = ce(logits_i_swap, y)
    g = gce(logits_b_swap, y_tilde, w.gce_q)
    return nc.reduce_mean(nc.mul(Tensor(weight), ce_i)) + nc.scale(nc.reduce_mean(g), w.lambda_swap_b)


def loss_total(l_re: Tensor, l_swap: Tensor | None, w: LossWeights) -> Tensor:
    return l_re if l_swap is None else l_re + nc.scale(l_swap, w.lambda_swap)
