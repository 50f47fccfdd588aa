"""Residual blocks and the hourglass network: shapes, naming, gradients."""

import numpy as np
import pytest

from gradcheck import fd_check, weighted_sum
from kneemark.nn import functional as F
from kneemark.nn.layers import BottleneckBlock, HmpBlock, make_block
from kneemark.nn.model import (
    FINAL_LAYER_PREFIX,
    HourglassModel,
    ModelConfig,
    backward,
    build_model,
    forward,
)
from kneemark.nn.tensor import Tensor


@pytest.mark.parametrize("kind", ["hmp", "bottleneck"])
@pytest.mark.parametrize("n,m", [(4, 4), (4, 8)])
def test_block_output_shape_and_skip(rng, kind, n, m):
    blk = make_block(kind, n, m, np.random.default_rng(0), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, n, 6, 6)), requires_grad=True)
    out = blk(x, train=False)
    assert out.shape == (2, m, 6, 6)
    names = [name for name, _ in blk.named_parameters()]
    assert ("skip.kernel" in names) == (n != m)


def test_hmp_channel_split_widths():
    blk = HmpBlock(8, 8, np.random.default_rng(0))
    assert blk.conv1.kernel.shape[0] == 4
    assert blk.conv2.kernel.shape[0] == 2
    assert blk.conv3.kernel.shape[0] == 2


def test_block_width_validation():
    with pytest.raises(ValueError):
        HmpBlock(4, 6, np.random.default_rng(0))  # not divisible by 4
    with pytest.raises(ValueError):
        BottleneckBlock(4, 5, np.random.default_rng(0))  # odd
    with pytest.raises(ValueError):
        make_block("resnext", 4, 4, np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["hmp", "bottleneck"])
def test_block_gradients(rng, kind):
    blk = make_block(kind, 4, 8, np.random.default_rng(5), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    w = rng.standard_normal((2, 8, 4, 4))
    leaves = [("x", x)] + list(blk.named_parameters())
    fd_check(lambda: weighted_sum(blk(x, train=True), w), leaves, rng, samples=3)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(width=3)  # hmp needs even width
    ModelConfig(width=3, block="bottleneck", depth=1, input_side=16, landmarks=1)
    with pytest.raises(ValueError):
        ModelConfig(depth=2, input_side=24)  # 24 % 16 != 0
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ValueError):
        ModelConfig(beta=0.0)
    with pytest.raises(ValueError):
        ModelConfig(block="unet")
    cfg = ModelConfig(width=4, depth=1, landmarks=2, input_side=16)
    assert cfg.heatmap_side == 4
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes(tiny_cfg, tiny_model):
    x = np.zeros((3, 1, tiny_cfg.input_side, tiny_cfg.input_side), dtype=np.float32)
    hm = tiny_model.forward_heatmap(Tensor(x))
    assert hm.shape == (3, tiny_cfg.landmarks, tiny_cfg.heatmap_side, tiny_cfg.heatmap_side)
    out = forward(tiny_model, x)
    assert out.shape == (3, tiny_cfg.landmarks, 2)
    assert np.isfinite(out.data).all()
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_forward_rejects_wrong_input_side(tiny_model):
    with pytest.raises(ValueError):
        forward(tiny_model, np.zeros((1, 1, 32, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        forward(tiny_model, np.zeros((1, 2, 16, 16), dtype=np.float32))


def test_build_model_is_deterministic(tiny_cfg):
    a = build_model(tiny_cfg, seed=3)
    b = build_model(tiny_cfg, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_arrays(), b.named_arrays()):
        assert na == nb
        np.testing.assert_array_equal(pa, pb)
    c = build_model(tiny_cfg, seed=4)
    diffs = [not np.array_equal(pa, pc) for (_, pa), (_, pc) in zip(a.named_arrays(), c.named_arrays())]
    assert any(diffs)


def test_named_arrays_order_is_params_then_buffers_depth_first(tiny_model):
    names = [n for n, _ in tiny_model.named_arrays()]
    assert len(names) == len(set(names))
    pnames = [n for n, _ in tiny_model.named_parameters()]
    bnames = [n for n, _ in tiny_model.named_buffers()]
    assert set(names) == set(pnames) | set(bnames)
    # every batchnorm contributes its running stats right after its params
    i = names.index("head.bn1.gamma")
    assert names[i:i + 4] == ["head.bn1.gamma", "head.bn1.beta",
                              "head.bn1.running_mean", "head.bn1.running_var"]
    assert any(n.startswith(FINAL_LAYER_PREFIX) for n in names)


def test_model_dtype_follows_build_argument(tiny_cfg):
    m64 = build_model(tiny_cfg, seed=0, dtype=np.float64)
    assert all(p.dtype == np.float64 for p in m64.parameters())
    m32 = build_model(tiny_cfg, seed=0)
    assert all(p.dtype == np.float32 for p in m32.parameters())


def test_backward_returns_gradient_for_every_parameter(tiny_cfg):
    model = build_model(tiny_cfg, seed=1, dtype=np.float64)
    x = np.random.default_rng(0).uniform(0, 1, (2, 1, 16, 16))
    out = forward(model, x, train=True)
    loss = F.scale(weighted_sum(out, np.ones(out.shape)), 1.0)
    grads = backward(model, loss)
    pnames = {n for n, _ in model.named_parameters()}
    assert set(grads) == pnames
    assert all(np.isfinite(g).all() for g in grads.values())


def test_train_mode_dropout_requires_rng(tiny_cfg):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), "dropout": 0.5})
    model = build_model(cfg, seed=0)
    x = np.zeros((1, 1, 16, 16), dtype=np.float32)
    with pytest.raises(ValueError):
        forward(model, x, train=True)
    forward(model, x, train=True, rng=np.random.default_rng(0))
