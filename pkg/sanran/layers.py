"""Parameterized building blocks on top of the autodiff primitives."""

import math

import numpy as np

from sanran import autodiff as ad
from sanran.autodiff import Parameter, Tensor
from sanran.errors import DataError, ShapeError


class Module:
    """Base class: parameter discovery, train/eval mode, state dicts."""

    training = True
    buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        for m in self.modules():
            for name in m.buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.float32

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise DataError(f"checkpoint is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()
            p.momentum = np.zeros_like(p.data)
            p.grad = None
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.asarray(state[name]).astype(getattr(owner, attr).dtype).copy())

    def _resolve(self, dotted: str):
        owner = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        return owner, attr


def kaiming(
    rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0)
) -> np.ndarray:
    return (rng.standard_normal(shape) * gain / math.sqrt(fan_in)).astype(np.float32)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_dim)
        weight = rng.uniform(-bound, bound, (in_dim, out_dim)).astype(np.float32)
        self.weight = Parameter(weight, "weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=np.float32), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(
        self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
        stride: int = 1, padding: int = 0,
    ):
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(kaiming(rng, (out_ch, in_ch, kernel, kernel), fan_in), "weight")

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch statistics while training, running averages in eval mode."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32), "gamma")
        self.beta = Parameter(np.zeros(channels, dtype=np.float32), "beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            running = (self.running_mean, self.running_var)
            out, _, _ = ad.batch_norm(x, self.gamma, self.beta, running, self.eps)
            return out
        out, mean, var = ad.batch_norm(x, self.gamma, self.beta, None, self.eps)
        count = x.data.size // x.shape[1]
        unbiased = var * (count / max(count - 1, 1))
        m = self.momentum
        dtype = self.running_mean.dtype
        self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(dtype)
        self.running_var = (m * self.running_var + (1 - m) * unbiased).astype(dtype)
        return out


class ResidualBlock(Module):
    """conv-BN-leaky-conv-BN with a projection shortcut, then leaky ReLU."""

    def __init__(
        self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator,
        slope: float = 0.2, bn_momentum: float = 0.9,
    ):
        self.slope = slope
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(out_ch, bn_momentum)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1)
        self.bn2 = BatchNorm(out_ch, bn_momentum)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, rng, stride=stride)
            self.shortcut_bn = BatchNorm(out_ch, bn_momentum)
        else:
            self.shortcut = self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = ad.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        out = self.bn2(self.conv2(out))
        skip = self.shortcut_bn(self.shortcut(x)) if self.shortcut is not None else x
        return ad.leaky_relu(out + skip, self.slope)
