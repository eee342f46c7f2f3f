"""Gradient attention maps over graph nodes, threshold selection and KL diversity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tape, Tensor

EPS_NUM = 1e-8


@dataclass
class AttentionMap:
    heat: np.ndarray
    expert: int = 0
    slice_index: Optional[int] = None  # None for temporal maps
    minmax: np.ndarray = field(init=False)
    distribution: np.ndarray = field(init=False)

    def __post_init__(self):
        self.heat = np.asarray(self.heat, dtype=np.float64)
        if np.any(self.heat < 0):
            raise ValueError("heat values must be nonnegative")
        self.minmax = minmax_view(self.heat)
        self.distribution = distribution_view(self.heat)


def minmax_view(heat: np.ndarray) -> np.ndarray:
    """Min-max scale along the last axis; constant rows map to all-ones."""
    heat = np.asarray(heat, dtype=np.float64)
    lo = heat.min(axis=-1, keepdims=True)
    span = heat.max(axis=-1, keepdims=True) - lo
    flat = span <= 0
    out = (heat - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 1.0, out)


def distribution_view(heat: np.ndarray, eps: float = EPS_NUM) -> np.ndarray:
    floored = np.asarray(heat, dtype=np.float64) + eps
    return floored / floored.sum(axis=-1, keepdims=True)


def normalize_map(amap: AttentionMap) -> AttentionMap:
    """Views are computed on construction; kept as a function for symmetry with the data flow."""
    return AttentionMap(amap.heat, amap.expert, amap.slice_index)


def gradient_heat(feature: Tensor, score: Tensor, tape: Tape) -> Tensor:
    """Heat per node from gradients of ``score`` w.r.t. ``feature`` (..., n, dF).

    alpha_j = mean over nodes of d score / d h_cj (a constant), then
    phi_c = sum_j relu(alpha_j * h_cj). The result stays differentiable in
    ``feature`` with alpha held fixed.
    """
    grad = tape.grad_of_intermediate(score, feature).data
    alpha = grad.mean(axis=-2, keepdims=True)
    weights = np.broadcast_to(alpha, feature.shape)
    return ad.sum(ad.relu(ad.mask_mul(feature, weights)), axis=-1)


def class_score(probs: Tensor, classes) -> Tensor:
    """Sum over the batch of probs[..., z] for the chosen class of each row."""
    onehot = ad.one_hot(classes, probs.shape[-1])
    if onehot.shape != probs.shape:
        raise DimensionError(f"class array shape {np.shape(classes)} does not match {probs.shape}")
    return ad.sum(ad.mask_mul(probs, onehot))


def attention_map(feature: Tensor, probs: Tensor, z, tape: Tape, expert: int = 0,
                  slice_index: Optional[int] = None) -> AttentionMap:
    """Single-map convenience wrapper: ``feature`` is (n, dF), ``probs`` is (Z,)."""
    heat = gradient_heat(feature, class_score(probs, z), tape)
    return AttentionMap(heat.data.copy(), expert, slice_index)


def select_by_threshold(heat: np.ndarray, eps: float) -> np.ndarray:
    """Keep nodes with value >= eps; rows with no survivor keep their (first) argmax."""
    if not 0 <= eps < 1:
        raise ValueError("threshold must lie in [0, 1)")
    heat = np.asarray(heat, dtype=np.float64)
    keep = heat >= eps
    empty = ~keep.any(axis=-1, keepdims=True)
    best = np.arange(heat.shape[-1]) == heat.argmax(axis=-1)[..., None]
    return keep | (empty & best)


def apply_mask(data: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the rows of ``data`` (..., n, F) whose mask entry (..., n) is False."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != data.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match rows of {data.shape}")
    full = np.broadcast_to(mask[..., None], data.shape).astype(np.float64)
    return ad.mask_mul(data, full)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError("distribution lengths differ")
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def kl_penalty(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.exp(-kl_divergence(p, q))


def distribution_tensor(heat: Tensor, eps: float = EPS_NUM) -> Tensor:
    floored = ad.add_scalar(heat, eps)
    total = ad.sum(floored, axis=-1, keepdims=True)
    return ad.div(floored, ad.expand(total, floored.shape))


def kl_penalty_tensor(heat_p: Tensor, heat_q: Tensor) -> Tensor:
    """exp(-KL(p || q)) per row, differentiable in both heat tensors."""
    if heat_p.shape != heat_q.shape:
        raise DimensionError("map lengths differ")
    p = distribution_tensor(heat_p)
    q = distribution_tensor(heat_q)
    d = ad.sum(ad.mul(p, ad.sub(ad.log(p), ad.log(q))), axis=-1)
    return ad.exp(ad.neg(d))
