"""Optimizer, cross-validation splitting, sample preparation, and the
training loop.

Determinism contract: given identical samples, configuration, and seed, a
training run is bit-reproducible. Every random draw comes from a named
numpy Generator keyed as [seed, epoch, stream]; per-sample augmentation
streams are [seed, epoch, sample_index] (see augment.sample_rng), and the
loop-level streams below use indices >= 2**31 so they never collide with a
sample index.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import evaluation
from .augment import AugmentationConfig, augment_sample, sample_rng
from .checkpoint import save_checkpoint
from .imaging import Frame, Image, LandmarkSet, Side, crop_roi, flip_horizontal, resample, resize_pixels, resize_to, scale_points
from .losses import LOSSES, WingParams, make_loss, mixup_batch, mixup_criterion
from .nn import functional as F
from .nn.model import FINAL_LAYER_PREFIX, HourglassModel, backward, forward
from .nn.tensor import no_grad

SHUFFLE_STREAM = 2 ** 31
MIXUP_STREAM = 2 ** 31 + 1
DROPOUT_STREAM = 2 ** 31 + 2


class Adam(object):
    """Adam with bias correction and coupled L2 regularization (the decay
    term is added to the gradient before the moment updates)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if not self.params:
            raise ValueError("no parameters to optimize")
        if not (lr > 0 and eps > 0 and weight_decay >= 0):
            raise ValueError(f"bad optimizer settings: lr={lr}, eps={eps}, weight_decay={weight_decay}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {betas}")
        self.lr = lr
        self.betas = (b1, b2)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters.
        Parameters whose grad is None are left untouched (their moments do
        not advance either)."""
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Cross-validation

def make_cv_splits(items, n_folds: int, seed: int = 0, patient_of=None, kl_of=None):
    """Patient-grouped, grade-stratified folds.

    No patient appears in more than one validation fold, and within each
    severity grade patients are dealt round-robin (after a seeded shuffle),
    so per-fold grade histograms differ by at most one patient per grade.
    Returns [(train_indices, val_indices), ...] with sorted index arrays.
    """
    if patient_of is None:
        patient_of = lambda it: it.patient_id
    if kl_of is None:
        kl_of = lambda it: it.kl
    items = list(items)
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    by_patient: dict[str, list[int]] = {}
    grade: dict[str, int] = {}
    for i, it in enumerate(items):
        pid = patient_of(it)
        by_patient.setdefault(pid, []).append(i)
        # a patient's stratification grade is their worst knee
        grade[pid] = max(grade.get(pid, 0), int(kl_of(it)))
    if len(by_patient) < n_folds:
        raise ValueError(f"{len(by_patient)} patients cannot fill {n_folds} folds")
    rng = np.random.default_rng([seed, 0x5])
    fold_members: list[list[str]] = [[] for _ in range(n_folds)]
    cursor = 0
    for g in sorted(set(grade.values())):
        pids = sorted(p for p, gg in grade.items() if gg == g)
        rng.shuffle(pids)
        for pid in pids:
            fold_members[cursor % n_folds].append(pid)
            cursor += 1
    splits = []
    for f in range(n_folds):
        val = sorted(i for pid in fold_members[f] for i in by_patient[pid])
        val_set = set(val)
        train = sorted(i for i in range(len(items)) if i not in val_set)
        splits.append((np.array(train, dtype=np.int64), np.array(val, dtype=np.int64)))
    return splits


# ---------------------------------------------------------------------------
# Samples

@dataclass
class Sample:
    """One training/evaluation unit in the model's input frame.

    image: square, side equal to the model input side.
    landmarks: pixel-frame targets on that image.
    scale_mm: millimetres per input pixel along (x, y); they differ when the
    source was resized anisotropically.
    """

    image: Image
    landmarks: LandmarkSet
    scale_mm: tuple[float, float]
    id: str = ""
    patient_id: str = ""
    kl: int = 0

    def __post_init__(self):
        if self.image.width != self.image.height:
            raise ValueError(f"sample image must be square, got {self.image.width}x{self.image.height}")
        if self.landmarks.frame is not Frame.PIXEL:
            raise ValueError("sample landmarks must be in the pixel frame")


def prepare_landmark_sample(
    img: Image,
    landmarks: LandmarkSet,
    side: Side,
    center_px: tuple[float, float],
    *,
    spacing_mm: float = 0.3,
    crop_mm: float = 140.0,
    input_side: int = 256,
    patient_id: str = "",
    kl: int = 0,
) -> Sample:
    """Resample to spacing_mm, crop crop_mm around the center, mirror left
    knees into right-knee orientation (with the landmark index remap), and
    resize to the model input side.

    center_px is in the source image's pixel frame, as are the landmarks.
    """
    if landmarks.frame is not Frame.PIXEL:
        raise ValueError("landmarks must be in the source pixel frame")
    res = resample(img, spacing_mm)
    pts = scale_points(landmarks.points, img.width, img.height, res.width, res.height)
    c = scale_points(np.array([center_px], dtype=np.float64), img.width, img.height, res.width, res.height)[0]
    crop, tf = crop_roi(res, (c[0] * spacing_mm, c[1] * spacing_mm), crop_mm)
    tf = tf.with_resize(input_side)
    pts = tf.to_roi(pts)
    out = resize_to(crop, input_side)
    lms = LandmarkSet(pts, frame=Frame.PIXEL, image_id=out.id)
    if side is Side.LEFT:
        out, lms = flip_horizontal(out, lms)
    return Sample(
        image=out,
        landmarks=lms,
        scale_mm=(out.spacing, out.spacing),
        id=img.id,
        patient_id=patient_id,
        kl=kl,
    )


def prepare_roi_sample(
    img: Image,
    center_px: tuple[float, float],
    side: Side,
    *,
    spacing_mm: float = 1.0,
    input_side: int = 256,
    patient_id: str = "",
    kl: int = 0,
) -> Sample:
    """Build a joint-center localization sample from a whole (single-knee)
    image: resample to spacing_mm, squash to the model's square input, and
    mirror left knees. The single target is the joint center.

    Non-square sources are distorted; scale_mm records the per-axis scale.
    """
    res = resample(img, spacing_mm)
    c = scale_points(np.array([center_px], dtype=np.float64), img.width, img.height, res.width, res.height)
    c = scale_points(c, res.width, res.height, input_side, input_side)
    pixels = resize_pixels(res.pixels, input_side, input_side)
    out = Image(pixels, spacing=res.spacing * res.width / input_side, id=img.id)
    lms = LandmarkSet(c, frame=Frame.PIXEL, image_id=out.id)
    if side is Side.LEFT:
        out, lms = flip_horizontal(out, lms)
    return Sample(
        image=out,
        landmarks=lms,
        scale_mm=(spacing_mm * res.width / input_side, spacing_mm * res.height / input_side),
        id=img.id,
        patient_id=patient_id,
        kl=kl,
    )


# ---------------------------------------------------------------------------
# Training configuration and loop

@dataclass(frozen=True)
class TrainConfig:
    """Loop settings. coord_units picks the length unit the loss sees:
    'heatmap' multiplies normalized differences by the heatmap side so the
    robust-loss knees (w, offset) are in heatmap pixels; 'normalized' leaves
    them on the [0, 1] scale."""

    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    loss: str = "wing"
    wing_w: float = 15.0
    wing_offset: float = 3.0
    coord_units: str = "heatmap"
    mixup_alpha: float = 0.0
    augment: AugmentationConfig | None = None
    seed: int = 0
    radii_mm: tuple = evaluation.DEFAULT_RADII_MM
    outlier_mm: float = evaluation.OUTLIER_MM
    stop_radius_mm: float | None = None
    stop_level: float = 1.0
    eval_batch: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("epochs, batch_size, and eval_batch must be >= 1")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ValueError(f"lr must be > 0 and weight_decay >= 0, got {self.lr}, {self.weight_decay}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}, expected one of {sorted(LOSSES)}")
        if self.coord_units not in ("heatmap", "normalized"):
            raise ValueError(f"coord_units must be 'heatmap' or 'normalized', got {self.coord_units!r}")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0 (0 disables mixing)")
        if not (0.0 < self.stop_level <= 1.0):
            raise ValueError("stop_level must be in (0, 1]")
        if self.stop_radius_mm is not None and self.stop_radius_mm not in self.radii_mm:
            raise ValueError(f"stop_radius_mm {self.stop_radius_mm} is not a tracked radius {self.radii_mm}")


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_score: float
    epochs_run: int
    checkpoint_dir: str | None
    wall_time_s: float


def _resolve_loss(cfg: TrainConfig, heatmap_side: int):
    units = float(heatmap_side) if cfg.coord_units == "heatmap" else 1.0
    if cfg.loss == "wing":
        params = WingParams.from_w_offset(cfg.wing_w, cfg.wing_offset, scale=units)
        return make_loss("wing", params)
    base = make_loss(cfg.loss)
    if units == 1.0:
        return base
    return lambda pred, target: base(F.scale(pred, units), np.asarray(target) * units)


def _check_samples(samples, model: HourglassModel, what: str) -> None:
    for s in samples:
        if s.image.width != model.cfg.input_side:
            raise ValueError(
                f"{what} sample {s.id!r} has side {s.image.width}, model expects {model.cfg.input_side}"
            )
        if s.landmarks.count != model.cfg.landmarks:
            raise ValueError(
                f"{what} sample {s.id!r} has {s.landmarks.count} landmarks, model expects {model.cfg.landmarks}"
            )


def predict_norm(model: HourglassModel, samples, batch_size: int = 16) -> np.ndarray:
    """Normalized (N, M, 2) predictions in eval mode."""
    outs = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x = np.stack([s.image.pixels.astype(np.float32)[None] for s in chunk])
            outs.append(forward(model, x, train=False).data.astype(np.float64))
    return np.concatenate(outs, axis=0)


def evaluate_samples(model: HourglassModel, samples, cfg: TrainConfig) -> dict:
    """Radial-error metrics of the model on prepared samples."""
    _check_samples(samples, model, "eval")
    preds = predict_norm(model, samples, cfg.eval_batch)
    side = model.cfg.input_side
    gt = np.stack([s.landmarks.points for s in samples])
    scale = np.array([s.scale_mm for s in samples], dtype=np.float64)
    err = evaluation.radial_errors(preds * side, gt, scale)
    metrics = {f"pck@{r:g}mm": evaluation.pck(err, r) for r in cfg.radii_mm}
    metrics["outlier_rate"] = evaluation.outlier_rate(err, cfg.outlier_mm)
    metrics["mean_mm"] = float(err.mean())
    return metrics


def _snapshot(model: HourglassModel) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.named_arrays()}


def _restore(model: HourglassModel, state: dict[str, np.ndarray]) -> None:
    for name, arr in model.named_arrays():
        arr[...] = state[name]


def train(
    model: HourglassModel,
    train_samples,
    val_samples=None,
    cfg: TrainConfig = TrainConfig(),
    checkpoint_dir=None,
    log=None,
) -> TrainResult:
    """Run the optimization loop.

    Model selection: each epoch gets a score (mean PCK over cfg.radii_mm on
    val_samples, or -loss when there is no validation set); the earliest
    epoch with the strictly best score wins, the model is restored to it at
    the end, and, if checkpoint_dir is given, saved there once.

    Stops early once pck@stop_radius_mm reaches stop_level on the
    validation set, when configured.
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise ValueError("no training samples")
    _check_samples(train_samples, model, "train")
    loss_fn = _resolve_loss(cfg, model.cfg.heatmap_side)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(train_samples)
    history: list[dict] = []
    best_score = -np.inf
    best_epoch = -1
    best_state = _snapshot(model)
    t0 = time.monotonic()
    epochs_run = 0
    for epoch in range(cfg.epochs):
        order = np.arange(n)
        np.random.default_rng([cfg.seed, epoch, SHUFFLE_STREAM]).shuffle(order)
        mix_rng = np.random.default_rng([cfg.seed, epoch, MIXUP_STREAM])
        drop_rng = np.random.default_rng([cfg.seed, epoch, DROPOUT_STREAM])
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs, ts = [], []
            for i in idx:
                s = train_samples[int(i)]
                img, lms = s.image, s.landmarks
                if cfg.augment is not None:
                    img, lms = augment_sample(img, lms, cfg.augment, sample_rng(cfg.seed, epoch, int(i)))
                xs.append(img.pixels.astype(np.float32)[None])
                ts.append((lms.points / float(img.width)).astype(np.float32))
            x = np.stack(xs)
            t = np.stack(ts)
            model.zero_grad()
            if cfg.mixup_alpha > 0.0:
                mixed, p1, p2, lam_p = mixup_batch(x, t, cfg.mixup_alpha, mix_rng)
                o1 = forward(model, x, train=True, rng=drop_rng)
                o_mixed = forward(model, mixed, train=True, rng=drop_rng)
                loss = mixup_criterion(loss_fn, o1, o_mixed, p1, p2, lam_p)
            else:
                out = forward(model, x, train=True, rng=drop_rng)
                loss = loss_fn(out, t)
            backward(model, loss)
            opt.step()
            batch_losses.append(float(loss.data))
        row = {"epoch": epoch, "loss": float(np.mean(batch_losses))}
        if val_samples:
            metrics = evaluate_samples(model, val_samples, cfg)
            row.update(metrics)
            row["score"] = float(np.mean([metrics[f"pck@{r:g}mm"] for r in cfg.radii_mm]))
        else:
            row["score"] = -row["loss"]
        history.append(row)
        epochs_run = epoch + 1
        if log is not None:
            parts = [f"epoch {epoch}", f"loss {row['loss']:.5f}"]
            parts += [f"{k} {row[k]:.4f}" for k in row if k.startswith("pck@")]
            log("  ".join(parts))
        if row["score"] > best_score:
            best_score = row["score"]
            best_epoch = epoch
            best_state = _snapshot(model)
        if (
            cfg.stop_radius_mm is not None
            and val_samples
            and row[f"pck@{cfg.stop_radius_mm:g}mm"] >= cfg.stop_level
        ):
            break
    _restore(model, best_state)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_score=best_score,
        epochs_run=epochs_run,
        checkpoint_dir=str(checkpoint_dir) if checkpoint_dir is not None else None,
        wall_time_s=time.monotonic() - t0,
    )


def history_to_csv(history, path) -> None:
    """Write training history rows to CSV (union of keys, epoch order)."""
    keys: list[str] = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in history:
            writer.writerow([repr(row[k]) if k in row else "" for k in keys])


def transfer_init(model: HourglassModel, source: HourglassModel) -> list[str]:
    """Copy parameters and running statistics from a trained source model
    into this one, keeping the fresh final heatmap projection (the two
    models may predict different landmark counts). Returns the skipped
    array names."""
    src = dict(source.named_arrays())
    skipped = []
    for name, arr in model.named_arrays():
        if name.startswith(FINAL_LAYER_PREFIX):
            skipped.append(name)
            continue
        other = src.get(name)
        if other is None:
            raise ValueError(f"source model has no array {name!r}; trunk architectures differ")
        if other.shape != arr.shape:
            raise ValueError(f"array {name!r} has shape {other.shape} in the source, {arr.shape} here")
        arr[...] = other
    return skipped
