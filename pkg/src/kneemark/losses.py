"""Coordinate regression losses and MixUp.

All losses take predicted coordinates as a Tensor and targets as a plain
array of the same shape, reduce by the mean over every coordinate, and
register exact analytic gradients.
"""

import math
from dataclasses import dataclass

import numpy as np

from .nn.functional import add as _add, scale as _scale
from .nn.tensor import Tensor, accumulate_grad, make_node


@dataclass(frozen=True)
class WingParams:
    """Piecewise log/linear loss parameters.

    The loss is w*ln(1 + |d|/epsilon) for |d| < w and |d| - offset otherwise,
    with offset = w - w*ln(1 + w/epsilon) chosen so the pieces meet. scale
    multiplies coordinate differences before the piecewise map; trainers set
    it to the heatmap side so w is expressed in heatmap pixels, scale=1 keeps
    normalized units.
    """

    w: float = 15.0
    epsilon: float = 15.0 / (math.e ** 0.8 - 1.0)
    offset: float = 3.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.epsilon > 0 and self.scale > 0):
            raise ValueError("w, epsilon, and scale must all be positive")
        expected = self.w - self.w * math.log1p(self.w / self.epsilon)
        if not math.isclose(expected, self.offset, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(
                f"inconsistent wing parameters: w={self.w}, epsilon={self.epsilon} imply offset {expected}, got {self.offset}"
            )

    @classmethod
    def from_w_offset(cls, w: float, offset: float, scale: float = 1.0) -> "WingParams":
        if not (0 < offset < w):
            raise ValueError(f"offset must be in (0, w), got {offset}")
        epsilon = w / (math.exp((w - offset) / w) - 1.0)
        return cls(w=w, epsilon=epsilon, offset=offset, scale=scale)

    @classmethod
    def from_w_epsilon(cls, w: float, epsilon: float, scale: float = 1.0) -> "WingParams":
        offset = w - w * math.log1p(w / epsilon)
        return cls(w=w, epsilon=epsilon, offset=offset, scale=scale)


def wing_values(d: np.ndarray, params: WingParams) -> np.ndarray:
    """Elementwise loss for raw differences d (already scaled)."""
    a = np.abs(d)
    return np.where(a < params.w, params.w * np.log1p(a / params.epsilon), a - params.offset)


def wing_grad_values(d: np.ndarray, params: WingParams) -> np.ndarray:
    """Elementwise derivative; magnitude is exactly 1 beyond the log region."""
    a = np.abs(d)
    s = np.sign(d)
    return np.where(a < params.w, s * (params.w / (params.epsilon + a)), s)


def _reduce_loss(pred: Tensor, target: np.ndarray, values_fn, grad_fn) -> Tensor:
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"target shape {t.shape} does not match prediction shape {pred.shape}")
    d = pred.data - t
    vals = values_fn(d)
    out = np.asarray(vals.mean(), dtype=pred.dtype)
    n = d.size

    def backward_fn(g: np.ndarray) -> None:
        if pred.requires_grad:
            accumulate_grad(pred, (float(g) / n) * grad_fn(d))

    return make_node(out, (pred,), backward_fn)


def wing_loss(pred: Tensor, target: np.ndarray, params: WingParams = WingParams()) -> Tensor:
    s = params.scale
    return _reduce_loss(
        pred, target,
        lambda d: wing_values(d * s, params),
        lambda d: wing_grad_values(d * s, params) * s,
    )


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return _reduce_loss(pred, target, np.abs, np.sign)


def l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return _reduce_loss(pred, target, np.square, lambda d: 2.0 * d)


def elastic_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return _reduce_loss(pred, target, lambda d: np.abs(d) + np.square(d), lambda d: np.sign(d) + 2.0 * d)


LOSSES = {"wing": wing_loss, "l1": l1_loss, "l2": l2_loss, "elastic": elastic_loss}


def make_loss(name: str, wing_params: WingParams | None = None):
    if name not in LOSSES:
        raise ValueError(f"unknown loss {name!r}, expected one of {sorted(LOSSES)}")
    if name == "wing":
        params = wing_params if wing_params is not None else WingParams()
        return lambda pred, target: wing_loss(pred, target, params)
    return LOSSES[name]


# ---------------------------------------------------------------------------
# MixUp

def mixup_batch(
    x: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Convex-combine the batch with a permuted copy of itself.

    lam' = max(lam, 1 - lam) with lam ~ Beta(alpha, alpha), so lam' in
    [0.5, 1] and the first operand dominates. Targets are returned unmixed as
    (p1, p2) = (targets, permuted targets). A batch of one is degenerate:
    identity permutation, x' = x. `lam` forces the coefficient (the Beta draw
    is still consumed, keeping rng streams aligned); used by tests.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    b = x.shape[0]
    if b < 1 or targets.shape[0] != b:
        raise ValueError(f"batch mismatch: x has {b} rows, targets {targets.shape[0]}")
    raw = float(rng.beta(alpha, alpha))
    if lam is None:
        lam = raw
    lam_p = max(lam, 1.0 - lam)
    if b == 1:
        perm = np.arange(1)
    else:
        perm = rng.permutation(b)
    x2 = x[perm]
    # lerp form: exactly x when lam' == 1 and exactly x when x2 == x,
    # which the direct two-product affine form does not guarantee in floats
    mixed = x + (1.0 - lam_p) * (x2 - x)
    return mixed, targets, targets[perm], lam_p


def mixup_criterion(base_loss, o1: Tensor, o_mixed: Tensor, p1: np.ndarray, p2: np.ndarray, lam_p: float) -> Tensor:
    """lam' * base_loss(o1, p1) + (1 - lam') * base_loss(o_mixed, p2).

    o1 is the network output for the unmixed batch, o_mixed for the mixed
    batch; p2 is the permuted target set. With lam' = 1 this reduces exactly
    to base_loss(o1, p1) (the second term is scaled by 0.0).
    """
    if not (0.5 <= lam_p <= 1.0):
        raise ValueError(f"lam' must be in [0.5, 1], got {lam_p}")
    return _add(_scale(base_loss(o1, p1), lam_p), _scale(base_loss(o_mixed, p2), 1.0 - lam_p))
