"""Minimal module system: parameters, layers and deterministic traversal."""
from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, matmul, add


class Parameter(Tensor):
    """Trainable leaf. ``decay_exempt`` marks norm affines and biases, which
    weight decay and trust-ratio scaling skip."""

    __slots__ = ("decay_exempt",)

    def __init__(self, data, decay_exempt: bool = False, requires_grad: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=requires_grad)
        self.decay_exempt = decay_exempt


class Module:
    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.modules(prefix):
            bufs = getattr(mod, "buffers", None)
            if bufs is None:
                continue
            for bname, arr in bufs().items():
                yield f"{name}.{bname}", arr

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Module":
        return copy.deepcopy(self)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        ws: bool = False,
        ws_eps: float = 1e-4,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.ws = ws
        self.ws_eps = ws_eps
        self.weight = Parameter(he_normal(rng, (kernel, kernel, cin, cout), kernel * kernel * cin))
        self.bias = Parameter(np.zeros(cout), decay_exempt=True) if bias else None

    def effective_weight(self) -> Tensor:
        if self.ws:
            from .norms import weight_standardize

            return weight_standardize(self.weight, self.ws_eps)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.effective_weight(), self.stride, self.padding)
        return add(out, self.bias) if self.bias is not None else out


class Linear(Module):
    """``y = x @ W + b`` with W of shape (in, out)."""

    def __init__(
        self,
        din: int,
        dout: int,
        rng: np.random.Generator,
        bias: bool = True,
        ws: bool = False,
        ws_eps: float = 1e-4,
    ):
        super().__init__()
        self.ws = ws
        self.ws_eps = ws_eps
        self.weight = Parameter(he_normal(rng, (din, dout), din))
        self.bias = Parameter(np.zeros(dout), decay_exempt=True) if bias else None

    def effective_weight(self) -> Tensor:
        if self.ws:
            from .norms import weight_standardize

            return weight_standardize(self.weight, self.ws_eps)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.effective_weight())
        return add(out, self.bias) if self.bias is not None else out
