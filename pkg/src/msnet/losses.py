"""Dice-form losses, one-hot conversion, L2 penalties and the two training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import ContractError, ShapeError, Tensor, add, add_scalars, make_node, scale

ETA = 1e-4
ALPHA = 0.5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = ALPHA
    eta: float = ETA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eta < 0:
            raise ContractError(f"eta must be non-negative, got {self.eta}")


def dice_loss(probs: Tensor, target) -> Tensor:
    """1 - 2*sum(m*p) / (sum(m^2) + sum(p^2)), summed jointly over every
    pixel and channel of the batch.  ``target`` is treated as a constant.

    No smoothing term: a softmax map always has sum(m^2) > 0.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if probs.shape != t.shape:
        raise ShapeError(f"dice_loss: probs {probs.shape} vs target {t.shape}")
    if probs.data.size == 0:
        raise ContractError("dice_loss: empty batch")
    m = probs.data
    inter = float((m * t).sum())
    denom = float((m * m).sum() + (t * t).sum())
    value = 1.0 - 2.0 * inter / denom

    def back(g):
        # d/dm [-2I/D] = -2t/D + 4I*m/D^2
        return (float(g) * (-2.0 * t / denom + 4.0 * inter * m / (denom * denom)),)

    return make_node(np.array(value), (probs,), back, "dice_loss")


def kt_loss(uni_probs: Tensor, aux_onehot) -> Tensor:
    """Knowledge-transfer loss: dice form against detached auxiliary one-hot masks."""
    target = aux_onehot.data if isinstance(aux_onehot, Tensor) else aux_onehot
    return dice_loss(uni_probs, np.array(target, dtype=np.float64, copy=True))


def onehot_argmax(probs) -> np.ndarray:
    """Per-pixel argmax over channels as a one-hot map; ties go to the lowest channel."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    idx = p.argmax(axis=1)
    return labels_to_onehot(idx, p.shape[1])


def labels_to_onehot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """(b, h, w) integer labels to a (b, c, h, w) float one-hot map."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def l2_penalty(groups: Sequence) -> Tensor:
    """Sum of squared convolution-kernel entries over the given parameter groups.

    Biases and normalization affine parameters are not penalized.
    """
    kernels = [k for g in groups for k in g.kernels()]
    if not kernels:
        return Tensor(np.array(0.0))
    value = sum(float((k.data * k.data).sum()) for k in kernels)
    return make_node(np.array(value), tuple(kernels), lambda g: tuple(2.0 * float(g) * k.data for k in kernels), "l2")


def aux_objective(site_losses: Sequence[Tensor], groups: Sequence, weights: LossWeights,
                  num_sites: int | None = None) -> Tensor:
    """Sum of per-site auxiliary dice losses plus eta * L2(encoder, all aux branches)."""
    if not site_losses or (num_sites is not None and len(site_losses) != num_sites):
        raise ContractError(f"aux_objective needs one loss per site, got {len(site_losses)}")
    return add(add_scalars(list(site_losses)), scale(l2_penalty(groups), weights.eta))


def uni_objective(site_pairs: Sequence[tuple[Tensor, Tensor]], groups: Sequence, weights: LossWeights,
                  num_sites: int | None = None) -> Tensor:
    """sum_s (alpha*L_kt + (1-alpha)*L_uni) + eta * L2(encoder, decoder).

    A pair may carry ``None`` as its knowledge-transfer term, which is only
    valid with alpha = 0.
    """
    if not site_pairs or (num_sites is not None and len(site_pairs) != num_sites):
        raise ContractError(f"uni_objective needs one pair per site, got {len(site_pairs)}")
    a = weights.alpha
    terms = []
    for kt, sup in site_pairs:
        if kt is None:
            if a != 0.0:
                raise ContractError("missing knowledge-transfer term with alpha > 0")
            terms.append(scale(sup, 1.0))
        else:
            terms.append(add(scale(kt, a), scale(sup, 1.0 - a)))
    return add(add_scalars(terms), scale(l2_penalty(groups), weights.eta))
