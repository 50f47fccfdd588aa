"""Parameter containers and the two residual block variants.

Module keeps insertion-ordered registries of parameters (trainable Tensors),
buffers (non-trainable arrays such as batch-norm running statistics), and
child modules, so checkpoint serialization sees one stable, deterministic
name order.
"""

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def named_arrays(self, prefix: str = ""):
        """Parameters then buffers at each module, depth first: the canonical
        checkpoint order."""
        for name, p in self._params.items():
            yield prefix + name, p.data
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_arrays(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.kernel = Tensor(_kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, ch: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(ch, dtype=dtype))
        self.register_buffer("running_var", np.ones(ch, dtype=dtype))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             train=train, momentum=self.momentum, eps=self.eps)


class BottleneckBlock(Module):
    """Pre-activation residual bottleneck: BN+ReLU before each of
    1x1 (m/2) -> 3x3 (m/2) -> 1x1 (m), plus a skip (1x1 conv iff n != m).
    """

    def __init__(self, n: int, m: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if m % 2:
            raise ValueError(f"bottleneck width must be even, got {m}")
        half = m // 2
        self.bn1 = BatchNorm2d(n, dtype)
        self.conv1 = Conv2d(n, half, 1, rng, dtype=dtype)
        self.bn2 = BatchNorm2d(half, dtype)
        self.conv2 = Conv2d(half, half, 3, rng, padding=1, dtype=dtype)
        self.bn3 = BatchNorm2d(half, dtype)
        self.conv3 = Conv2d(half, m, 1, rng, dtype=dtype)
        self.skip = Conv2d(n, m, 1, rng, dtype=dtype) if n != m else None

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = self.conv1(F.relu(self.bn1(x, train)))
        y = self.conv2(F.relu(self.bn2(y, train)))
        y = self.conv3(F.relu(self.bn3(y, train)))
        s = self.skip(x) if self.skip is not None else x
        return F.add(y, s)


class HmpBlock(Module):
    """Hierarchical multi-scale parallel residual block: a cascade of three
    3x3 stages with widths m/2, m/4, m/4, each preceded by BN+ReLU and fed by
    the previous stage's output; the three outputs are concatenated back to m
    channels and summed with the skip (1x1 conv iff n != m).
    """

    def __init__(self, n: int, m: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if m % 4:
            raise ValueError(f"multi-scale block width must be divisible by 4, got {m}")
        self.bn1 = BatchNorm2d(n, dtype)
        self.conv1 = Conv2d(n, m // 2, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(m // 2, dtype)
        self.conv2 = Conv2d(m // 2, m // 4, 3, rng, padding=1, dtype=dtype)
        self.bn3 = BatchNorm2d(m // 4, dtype)
        self.conv3 = Conv2d(m // 4, m // 4, 3, rng, padding=1, dtype=dtype)
        self.skip = Conv2d(n, m, 1, rng, dtype=dtype) if n != m else None

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y1 = self.conv1(F.relu(self.bn1(x, train)))
        y2 = self.conv2(F.relu(self.bn2(y1, train)))
        y3 = self.conv3(F.relu(self.bn3(y2, train)))
        y = F.concat_channels([y1, y2, y3])
        s = self.skip(x) if self.skip is not None else x
        return F.add(y, s)


BLOCK_KINDS = {"hmp": HmpBlock, "bottleneck": BottleneckBlock}


def make_block(kind: str, n: int, m: int, rng: np.random.Generator, dtype=np.float32) -> Module:
    try:
        cls = BLOCK_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown block kind {kind!r}, expected one of {sorted(BLOCK_KINDS)}")
    return cls(n, m, rng, dtype=dtype)
