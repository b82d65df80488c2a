"""Parameter containers and layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


class Module:
    """Minimal module tree: attributes that are Parameters, Modules or buffers."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=DTYPE)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(prefix + mname + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                continue
            if target.shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} does not match {target.shape}")
            target[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_out, n_in)))
        self.bias = Parameter(_uniform(rng, bound, (n_out,))) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        n_in: int,
        n_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        pad_mode: str = "zeros",
    ):
        super().__init__()
        if kernel not in (1, 3) or stride not in (1, 2):
            raise ValueError(f"unsupported conv geometry: kernel={kernel}, stride={stride}")
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode
        fan_in = n_in * kernel * kernel
        # He-uniform; these blocks are always followed by ReLU or a cosine
        self.weight = Parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (n_out, n_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, pad_mode=self.pad_mode)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = F.BN_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


def freeze_batchnorm(module: Module) -> None:
    """Put every BatchNorm below ``module`` in eval mode (running stats fixed, affine still trains)."""
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.eval()


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


def conv_bn_relu(n_in: int, n_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 2) -> Sequential:
    # edge padding: a flat image region gives flat features right up to the border
    return Sequential(
        Conv2d(n_in, n_out, kernel, rng, stride=stride, padding=kernel // 2, bias=False, pad_mode="edge"),
        BatchNorm(n_out),
        ReLU(),
    )


def copy_parameters(src: Module, dst: Module) -> None:
    dst.load_state_dict(src.state_dict())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
