"""Activation normalization (BN, LN, GN, IN) and weight standardization.

Activations are channels-last: (N, H, W, C) for feature maps, (N, C) for
vectors. Weights keep the output unit on the last axis, so a "row" of a
weight (one output unit) is everything but the last axis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import Module, Parameter
from .tensor import Tensor, add, as_tensor, mul, reshape, standardize, standardize_stats

log = logging.getLogger(__name__)

KINDS = ("bn", "ln", "gn", "in", "none")
_ALIASES = {
    "batchnorm": "bn",
    "layernorm": "ln",
    "groupnorm": "gn",
    "instancenorm": "in",
    "-": "none",
    "": "none",
}


class NormError(ValueError):
    pass


@dataclass(frozen=True)
class NormScheme:
    kind: str = "bn"
    groups: int = 16
    eps: float = 1e-5
    affine: bool = True
    momentum: float = 0.9

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise NormError(f"unknown norm kind {self.kind!r}; expected one of {KINDS}")
        if self.eps <= 0:
            raise NormError("eps must be positive")
        if self.groups < 1:
            raise NormError("groups must be a positive integer")

    @property
    def uses_batch_stats(self) -> bool:
        return self.kind == "bn"


def _reduce_axes(ndim: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(spatial axes, all non-batch non-channel axes) for an activation rank."""
    if ndim == 4:
        return (1, 2), (1, 2)
    if ndim == 2:
        return (), ()
    raise NormError(f"expected a rank-2 or rank-4 activation, got rank {ndim}")


def _affine(y: Tensor, gamma, beta) -> Tensor:
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def batch_norm(
    x,
    gamma=None,
    beta=None,
    *,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel normalization over every axis but the channel axis.

    In training mode the batch statistics are used and, when running buffers
    are passed, they are updated in place as ``r <- momentum*r + (1-momentum)*batch``.
    Evaluation mode reads the running buffers only.
    """
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise NormError("batch_norm in train mode needs a batch of at least 2")
        y = standardize(x, axes, eps)
        if running_mean is not None and running_var is not None:
            mu, v = standardize_stats(x.data, axes)
            running_mean *= momentum
            running_mean += (1 - momentum) * mu.reshape(-1)
            running_var *= momentum
            running_var += (1 - momentum) * v.reshape(-1)
    else:
        if running_mean is None or running_var is None:
            raise NormError("batch_norm eval mode needs populated running statistics")
        inv = 1.0 / np.sqrt(running_var + eps)
        y = mul(add(x, -running_mean), inv)
    return _affine(y, gamma, beta)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (H, W, C/G) slices of ``groups`` channel groups."""
    x = as_tensor(x)
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise NormError(f"group_norm: {groups} groups do not divide {c} channels")
    spatial, _ = _reduce_axes(x.ndim)
    grouped = reshape(x, x.shape[:-1] + (groups, c // groups))
    axes = spatial + (x.ndim,)
    y = reshape(standardize(grouped, axes, eps), x.shape)
    return _affine(y, gamma, beta)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over all of its non-batch axes."""
    x = as_tensor(x)
    y = standardize(x, tuple(range(1, x.ndim)), eps)
    return _affine(y, gamma, beta)


def instance_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial extent."""
    x = as_tensor(x)
    spatial, _ = _reduce_axes(x.ndim)
    y = standardize(x, spatial, eps)
    return _affine(y, gamma, beta)


def weight_standardize(w, eps: float = 1e-4) -> Tensor:
    """Zero-mean, unit-variance standardization of every output unit's weights.

    ``w`` has the output unit on its last axis; statistics run over the
    remaining axes (input channels times kernel extent). Differentiable back
    to the raw ``w``.
    """
    w = as_tensor(w)
    if w.ndim < 2:
        raise NormError("weight_standardize expects at least a 2-D weight")
    return standardize(w, tuple(range(w.ndim - 1)), eps)


def resolve_groups(groups: int, channels: int) -> int:
    if channels < groups:
        log.warning("group norm: %d groups exceed %d channels, clamping to %d", groups, channels, channels)
        groups = channels
    if channels % groups:
        raise NormError(f"group norm: {groups} groups do not divide {channels} channels")
    return groups


class NormLayer(Module):
    """One normalization site.

    ``kind == "none"`` keeps only the affine (scale and offset). Sites can be
    tagged ``final_in_block`` by the residual block that owns them.
    """

    def __init__(self, channels: int, scheme: NormScheme, final_in_block: bool = False):
        super().__init__()
        self.scheme = scheme
        self.channels = channels
        self.final_in_block = final_in_block
        self.groups = resolve_groups(scheme.groups, channels) if scheme.kind == "gn" else None
        if scheme.affine:
            self.gamma = Parameter(np.ones(channels), decay_exempt=True)
            self.beta = Parameter(np.zeros(channels), decay_exempt=True)
        else:
            self.gamma = None
            self.beta = None
        if scheme.kind == "bn":
            self.running_mean = np.zeros(channels)
            self.running_var = np.ones(channels)
            self.num_batches_tracked = 0
        # capture hooks used by the init protocol
        self.capture = False
        self.last_stats: tuple[np.ndarray, np.ndarray] | None = None
        self.last_output: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return self.scheme.kind

    def buffers(self) -> dict[str, np.ndarray]:
        if self.kind != "bn":
            return {}
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "num_batches_tracked": np.array([float(self.num_batches_tracked)]),
        }

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        if self.kind != "bn":
            return
        self.running_mean[...] = bufs["running_mean"]
        self.running_var[...] = bufs["running_var"]
        self.num_batches_tracked = int(bufs["num_batches_tracked"][0])

    def forward(self, x: Tensor) -> Tensor:
        s = self.scheme
        if self.capture:
            axes = tuple(range(x.ndim - 1))
            mu, v = standardize_stats(x.data, axes)
            self.last_stats = (mu.reshape(-1), v.reshape(-1))
        if s.kind == "bn":
            if self.training:
                out = batch_norm(
                    x,
                    self.gamma,
                    self.beta,
                    running_mean=self.running_mean,
                    running_var=self.running_var,
                    training=True,
                    eps=s.eps,
                    momentum=s.momentum,
                )
                self.num_batches_tracked += 1
            else:
                if self.num_batches_tracked == 0:
                    raise NormError("batch_norm eval mode needs populated running statistics")
                out = batch_norm(
                    x, self.gamma, self.beta, running_mean=self.running_mean,
                    running_var=self.running_var, training=False, eps=s.eps,
                )
        elif s.kind == "gn":
            out = group_norm(x, self.groups, self.gamma, self.beta, s.eps)
        elif s.kind == "ln":
            out = layer_norm(x, self.gamma, self.beta, s.eps)
        elif s.kind == "in":
            out = instance_norm(x, self.gamma, self.beta, s.eps)
        else:
            out = _affine(x, self.gamma, self.beta)
        if self.capture:
            self.last_output = out.data.copy()
        return out

    def __repr__(self) -> str:
        tag = ", final" if self.final_in_block else ""
        return f"NormLayer({self.kind}, C={self.channels}{tag})"
