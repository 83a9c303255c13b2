"""Batch normalization and its domain-specific (per-site) variant."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ContractError, ShapeError, Tensor, make_node, parameter

EPSILON = 1e-5
MOMENTUM = 0.99


class SiteRoutingError(KeyError):
    """Raised when a forward is tagged with a site the layer does not know."""


@dataclass
class BnState:
    """Affine parameters and running statistics for one normalization layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = EPSILON
    momentum: float = MOMENTUM
    updates: int = 0

    @classmethod
    def create(cls, channels: int, epsilon: float = EPSILON, momentum: float = MOMENTUM) -> "BnState":
        if epsilon <= 0:
            raise ContractError("epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ContractError("momentum must lie in (0, 1)")
        return cls(
            gamma=parameter(np.ones(channels)),
            beta=parameter(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def copy(self) -> "BnState":
        return BnState(
            gamma=parameter(self.gamma.data.copy()),
            beta=parameter(self.beta.data.copy()),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            epsilon=self.epsilon,
            momentum=self.momentum,
            updates=self.updates,
        )


@dataclass
class DsbnState:
    """One :class:`BnState` per site; site ids run from 1 to S."""

    per_site: dict[int, BnState] = field(default_factory=dict)

    @classmethod
    def create(cls, channels: int, num_sites: int, epsilon: float = EPSILON,
               momentum: float = MOMENTUM) -> "DsbnState":
        return cls({s: BnState.create(channels, epsilon, momentum) for s in range(1, num_sites + 1)})

    @property
    def num_sites(self) -> int:
        return len(self.per_site)

    @property
    def channels(self) -> int:
        return next(iter(self.per_site.values())).channels

    def site(self, site: int) -> BnState:
        try:
            return self.per_site[site]
        except KeyError:
            raise SiteRoutingError(f"site {site} not in {sorted(self.per_site)}") from None

    def parameters(self) -> list[Tensor]:
        return [p for s in sorted(self.per_site) for p in self.per_site[s].parameters()]


def _check_input(x: Tensor, state: BnState) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"batch norm expects (b, c, h, w), got {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batch norm: channel axis 1 has {x.shape[1]}, state has {state.channels}")


def _affine_node(x: Tensor, xhat: np.ndarray, inv_std: np.ndarray, state: BnState,
                 batch_stats: bool, op: str) -> Tensor:
    gamma, beta = state.gamma, state.beta
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if batch_stats:
                n = g.shape[0] * g.shape[2] * g.shape[3]
                gx = scale * (g - gb[None, :, None, None] / n - xhat * (gg / n)[None, :, None, None])
            else:
                gx = scale * g
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), back, op)


def bn_forward_train(x: Tensor, state: BnState, update_stats: bool = True) -> Tensor:
    """Normalize with batch statistics and (optionally) fold them into the running averages.

    The biased (1/N) variance is used both for normalization and for the
    running update.
    """
    _check_input(x, state)
    b, _, h, w = x.shape
    if b * h * w < 2:
        raise ContractError(f"degenerate batch: b*h*w = {b * h * w} < 2")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = centered * inv_std[None, :, None, None]
    if update_stats:
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
        state.updates += 1
    return _affine_node(x, xhat, inv_std, state, True, "bn_train")


def bn_forward_eval(x: Tensor, state: BnState) -> Tensor:
    """Normalize with the running statistics; ``state`` is left untouched."""
    _check_input(x, state)
    inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    return _affine_node(x, xhat, inv_std, state, False, "bn_eval")


def bn_forward(x: Tensor, state: BnState, mode: str) -> Tensor:
    """Dispatch on ``mode``: "train", "eval", or "batch" (batch stats, no running update)."""
    if mode == "train":
        return bn_forward_train(x, state)
    if mode == "eval":
        return bn_forward_eval(x, state)
    if mode == "batch":
        return bn_forward_train(x, state, update_stats=False)
    raise ContractError(f"unknown normalization mode {mode!r}")


def dsbn_forward(x: Tensor, site: int, state: DsbnState, mode: str) -> Tensor:
    """Route the batch to the normalization layer of ``site``."""
    return bn_forward(x, state.site(site), mode)
