"""Hourglass landmark network with a soft-argmax head.

Layout for width N, depth d, M output maps, input side S (single channel):

* entry: 7x7 conv stride 2 (1 -> N), residual block (N -> 2N), 2x2 maxpool,
  three residual blocks (2N -> 2N -> 2N -> 4N); spatial side becomes S/4;
* hourglass of depth d at a constant 4N channels: each level is
  maxpool -> 3 residual blocks -> next level -> 2x upsample, summed with the
  level's input (direct skip); the innermost level runs 3 residual blocks in
  place of a deeper level;
* head: twice [dropout -> 1x1 conv (4N) -> BN -> ReLU], then a 1x1 conv to M
  heatmaps at side S/4 and soft-argmax into normalized (x, y) coordinates.

The residual block kind is either the multi-scale "hmp" cascade or the
classic bottleneck; see kneemark.nn.layers.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import functional as F
from .layers import BatchNorm2d, Conv2d, Module, make_block
from .tensor import Tensor, backward as _tensor_backward

FINAL_LAYER_PREFIX = "head.final."


@dataclass(frozen=True)
class ModelConfig:
    width: int = 24
    depth: int = 6
    landmarks: int = 16
    input_side: int = 256
    beta: float = 1.0
    dropout: float = 0.25
    block: str = "hmp"

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.landmarks < 1:
            raise ValueError("width, depth, and landmarks must all be >= 1")
        if self.block not in ("hmp", "bottleneck"):
            raise ValueError(f"unknown block kind {self.block!r}")
        if self.block == "hmp" and self.width % 2:
            raise ValueError(f"hmp blocks need an even width, got {self.width}")
        divisor = 2 ** (self.depth + 2)
        if self.input_side % divisor:
            raise ValueError(
                f"input side {self.input_side} must be divisible by 2^(depth+2) = {divisor}"
            )
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def heatmap_side(self) -> int:
        return self.input_side // 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class HourglassModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        n = cfg.width
        wide = 4 * n
        kind = cfg.block

        entry = Module()
        entry.conv = Conv2d(1, n, 7, rng, stride=2, padding=3, dtype=dtype)
        entry.res0 = make_block(kind, n, 2 * n, rng, dtype)
        entry.res1 = make_block(kind, 2 * n, 2 * n, rng, dtype)
        entry.res2 = make_block(kind, 2 * n, 2 * n, rng, dtype)
        entry.res3 = make_block(kind, 2 * n, wide, rng, dtype)
        self.entry = entry

        hg = Module()
        for lvl in range(1, cfg.depth + 1):
            level = Module()
            for j in range(3):
                setattr(level, f"b{j}", make_block(kind, wide, wide, rng, dtype))
            setattr(hg, f"level{lvl}", level)
        inner = Module()
        for j in range(3):
            setattr(inner, f"b{j}", make_block(kind, wide, wide, rng, dtype))
        hg.inner = inner
        self.hg = hg

        head = Module()
        head.conv1 = Conv2d(wide, wide, 1, rng, dtype=dtype)
        head.bn1 = BatchNorm2d(wide, dtype)
        head.conv2 = Conv2d(wide, wide, 1, rng, dtype=dtype)
        head.bn2 = BatchNorm2d(wide, dtype)
        head.final = Conv2d(wide, cfg.landmarks, 1, rng, dtype=dtype)
        self.head = head

    def _run_blocks(self, container: Module, x: Tensor, train: bool) -> Tensor:
        for j in range(3):
            x = getattr(container, f"b{j}")(x, train)
        return x

    def _hourglass(self, x: Tensor, lvl: int, train: bool) -> Tensor:
        level = getattr(self.hg, f"level{lvl}")
        f = self._run_blocks(level, F.maxpool2(x), train)
        if lvl < self.cfg.depth:
            deeper = self._hourglass(f, lvl + 1, train)
        else:
            deeper = self._run_blocks(self.hg.inner, f, train)
        return F.add(F.upsample_nearest2(deeper), x)

    def forward_heatmap(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.input_side or x.shape[3] != cfg.input_side:
            raise ValueError(
                f"expected input (batch, 1, {cfg.input_side}, {cfg.input_side}), got {x.shape}"
            )
        y = self.entry.conv(x)
        y = self.entry.res0(y, train)
        y = F.maxpool2(y)
        y = self.entry.res1(y, train)
        y = self.entry.res2(y, train)
        y = self.entry.res3(y, train)
        y = self._hourglass(y, 1, train)
        y = F.dropout(y, cfg.dropout, train, rng)
        y = F.relu(self.head.bn1(self.head.conv1(y), train))
        y = F.dropout(y, cfg.dropout, train, rng)
        y = F.relu(self.head.bn2(self.head.conv2(y), train))
        return self.head.final(y)

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return F.soft_argmax(self.forward_heatmap(x, train, rng), beta=self.cfg.beta)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> HourglassModel:
    """Construct a model with fan-in-scaled uniform conv init (deterministic
    in seed). Parameter names and their order are stable for a given cfg."""
    rng = np.random.default_rng([seed, 0x6D0DE1])
    return HourglassModel(cfg, rng, dtype=dtype)


def forward(model: HourglassModel, batch: np.ndarray | Tensor, train: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Run the network on a (batch, 1, S, S) array; returns (batch, M, 2)
    normalized coordinates."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    return model(x, train=train, rng=rng)


def backward(model: HourglassModel, loss: Tensor) -> dict[str, np.ndarray]:
    """Backpropagate a scalar loss; returns gradients for every parameter."""
    _tensor_backward(loss)
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            raise RuntimeError(f"parameter {name} received no gradient")
        grads[name] = p.grad
    return grads
