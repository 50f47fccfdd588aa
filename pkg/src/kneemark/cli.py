"""Command-line interface.

Subcommands:
  gen-phantom      write a synthetic annotated corpus
  train-roi        train the joint-center localization model
  train-landmarks  train the 16-landmark model (optionally from a
                   pretrained trunk)
  infer            run the two-stage pipeline over a corpus
  evaluate         score a prediction CSV against ground truth
  ablate           run the preset ablation grid

All commands take `--config FILE` (flat `key = value` lines with dotted
keys) and repeatable `--set key=value` overrides. Exit codes: 0 on
success, 2 for usage errors, 1 for runtime failures.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugmentationConfig
from .checkpoint import CheckpointError, load_checkpoint
from .evaluation import (
    ABLATION_SUBSET,
    DEFAULT_RADII_MM,
    TEST_SUBSET,
    fold_report,
    radial_errors,
    render_report,
    write_report_csv,
    write_report_json,
)
from .imaging import (
    KNEE_LANDMARK_COUNT,
    AnnotationRecord,
    read_annotations,
    read_png,
    write_annotations,
)
from .nn.model import ModelConfig, build_model
from .phantom import PhantomSpec, write_corpus
from .pipeline import PipelineConfig, infer_bilateral, infer_knee
from .runconfig import ConfigError, apply_overrides, build_dataclass, pop_section, read_config
from .training import (
    TrainConfig,
    evaluate_samples,
    history_to_csv,
    make_cv_splits,
    prepare_landmark_sample,
    prepare_roi_sample,
    train,
    transfer_init,
)


def _load_flat(args) -> dict[str, str]:
    flat = read_config(args.config) if args.config else {}
    return apply_overrides(flat, args.overrides)


# every section a config file may carry; commands consume what they need and
# validate-then-ignore the rest, so one file can drive a whole workflow
_SECTION_TYPES = {
    "model": ModelConfig,
    "roi_model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentationConfig,
    "pipeline": PipelineConfig,
    "phantom": PhantomSpec,
}


def _consume_rest(flat: dict[str, str]) -> None:
    """Validate sections the command does not use, then reject leftovers."""
    for prefix, cls in _SECTION_TYPES.items():
        section = pop_section(flat, prefix)
        if prefix == "augment":
            section.pop("enabled", None)
        if prefix == "roi_model":
            section.setdefault("landmarks", "1")
        if section:
            build_dataclass(cls, section, prefix)
    if flat:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(flat))}")


def _augment_from(flat: dict[str, str], seed: int) -> AugmentationConfig | None:
    section = pop_section(flat, "augment")
    enabled = section.pop("enabled", "false").lower() in ("1", "true", "yes", "on")
    if not enabled:
        return None
    section.setdefault("seed", str(seed))
    return build_dataclass(AugmentationConfig, section, "augment")


def _load_records(data_dir: Path, want_landmarks: bool):
    """Corpus rows, excluded ones dropped. want_landmarks keeps only full
    16-point rows; otherwise any row with a usable center survives."""
    csv_path = data_dir / "annotations.csv"
    records = [r for r in read_annotations(csv_path) if not r.exclude]
    if want_landmarks:
        records = [r for r in records if r.landmarks.count == KNEE_LANDMARK_COUNT]
    if not records:
        raise ValueError(f"{csv_path}: no usable rows")
    return records


def _record_center(rec: AnnotationRecord) -> tuple[float, float]:
    if rec.center is not None:
        return rec.center
    if rec.landmarks.count == KNEE_LANDMARK_COUNT:
        p = rec.landmarks.points[4]
        return (float(p[0]), float(p[1]))
    raise ValueError(f"record {rec.image}/{rec.side.value} has no center label")


def _image_cache(data_dir: Path):
    cache: dict[str, object] = {}

    def get(rec: AnnotationRecord):
        if rec.image not in cache:
            cache[rec.image] = read_png(data_dir / rec.image, rec.spacing, id=rec.image)
        return cache[rec.image]

    return get


def _split_samples(samples, folds: int, fold: int, seed: int):
    if folds <= 1:
        return samples, []
    splits = make_cv_splits(samples, folds, seed=seed)
    if not (0 <= fold < folds):
        raise ValueError(f"fold must be in 0..{folds - 1}, got {fold}")
    tr, va = splits[fold]
    return [samples[i] for i in tr], [samples[i] for i in va]


def _run_training(args, task: str, flat: dict[str, str]) -> int:
    model_sec = pop_section(flat, "model")
    if task == "roi":
        # the center model reads roi_model.* when present, model.* otherwise
        roi_sec = pop_section(flat, "roi_model")
        if roi_sec:
            model_sec = roi_sec
        model_sec.setdefault("landmarks", "1")
    train_sec = pop_section(flat, "train")
    pipe_sec = pop_section(flat, "pipeline")
    tcfg = build_dataclass(TrainConfig, train_sec, "train")
    tcfg = replace(tcfg, augment=_augment_from(flat, tcfg.seed))
    _consume_rest(flat)
    mcfg = build_dataclass(ModelConfig, model_sec, "model")
    if task == "roi" and mcfg.landmarks != 1:
        raise ConfigError("the center model must have model.landmarks = 1")
    if task == "landmarks" and mcfg.landmarks != KNEE_LANDMARK_COUNT:
        raise ConfigError(f"the landmark model must have model.landmarks = {KNEE_LANDMARK_COUNT}")
    pcfg = build_dataclass(PipelineConfig, pipe_sec, "pipeline")

    data_dir = Path(args.data)
    records = _load_records(data_dir, want_landmarks=(task == "landmarks"))
    get_image = _image_cache(data_dir)
    samples = []
    for rec in records:
        img = get_image(rec)
        if task == "roi":
            samples.append(prepare_roi_sample(
                img, _record_center(rec), rec.side,
                spacing_mm=pcfg.roi_spacing_mm, input_side=mcfg.input_side,
                patient_id=rec.patient_id, kl=rec.kl,
            ))
        else:
            samples.append(prepare_landmark_sample(
                img, rec.landmarks, rec.side, _record_center(rec),
                spacing_mm=pcfg.crop_spacing_mm, crop_mm=pcfg.crop_mm,
                input_side=mcfg.input_side, patient_id=rec.patient_id, kl=rec.kl,
            ))
    train_s, val_s = _split_samples(samples, args.folds, args.fold, tcfg.seed)

    model = build_model(mcfg, seed=tcfg.seed)
    if getattr(args, "pretrained", None):
        source = load_checkpoint(args.pretrained)
        skipped = transfer_init(model, source)
        print(f"initialized from {args.pretrained} (kept fresh: {len(skipped)} arrays)")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(
        model, train_s, val_s or None, tcfg,
        checkpoint_dir=out_dir / "checkpoint",
        log=print if not args.quiet else None,
    )
    history_to_csv(result.history, out_dir / "history.csv")
    print(
        f"done: {result.epochs_run} epochs, best epoch {result.best_epoch} "
        f"(score {result.best_score:.4f}), checkpoint at {result.checkpoint_dir}"
    )
    if val_s:
        metrics = evaluate_samples(model, val_s, tcfg)
        parts = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items())
        print(f"validation: {parts}")
    return 0


def cmd_gen_phantom(args) -> int:
    flat = _load_flat(args)
    spec = build_dataclass(PhantomSpec, pop_section(flat, "phantom"), "phantom")
    _consume_rest(flat)
    csv_path = write_corpus(Path(args.out), spec, args.patients, bilateral=args.bilateral)
    kind = "bilateral" if args.bilateral else "single-knee"
    print(f"wrote {args.patients} patients ({kind}) to {csv_path}")
    return 0


def cmd_train_roi(args) -> int:
    return _run_training(args, "roi", _load_flat(args))


def cmd_train_landmarks(args) -> int:
    return _run_training(args, "landmarks", _load_flat(args))


def cmd_infer(args) -> int:
    flat = _load_flat(args)
    pcfg = build_dataclass(PipelineConfig, pop_section(flat, "pipeline"), "pipeline")
    _consume_rest(flat)
    if args.stages is not None:
        pcfg = replace(pcfg, passes=args.stages)
    lm_model = load_checkpoint(args.lm)
    roi_model = load_checkpoint(args.roi) if args.roi else None
    if roi_model is None and not args.gt_centers:
        raise ValueError("--roi is required unless --gt-centers is given")

    data_dir = Path(args.data)
    records = _load_records(data_dir, want_landmarks=False)
    get_image = _image_cache(data_dir)
    out_records = []
    if args.bilateral:
        by_image: dict[str, list[AnnotationRecord]] = {}
        for rec in records:
            by_image.setdefault(rec.image, []).append(rec)
        for image, recs in by_image.items():
            img = get_image(recs[0])
            centers = {r.side: _record_center(r) for r in recs} if args.gt_centers else None
            results = infer_bilateral(roi_model, lm_model, img, pcfg, centers=centers)
            for rec in recs:
                res = results[rec.side]
                out_records.append(replace_prediction(rec, res))
    else:
        for rec in records:
            img = get_image(rec)
            center = _record_center(rec) if args.gt_centers else None
            res = infer_knee(roi_model, lm_model, img, rec.side, pcfg, center_px=center)
            out_records.append(replace_prediction(rec, res))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_annotations(out_records, out_path)
    print(f"wrote {len(out_records)} predictions to {out_path}")
    return 0


def replace_prediction(rec: AnnotationRecord, res) -> AnnotationRecord:
    """Ground-truth row -> prediction row with the model's outputs."""
    return AnnotationRecord(
        image=rec.image, spacing=rec.spacing, patient_id=rec.patient_id,
        side=rec.side, kl=rec.kl, landmarks=res.landmarks,
        center=res.center_px, exclude=False,
    )


def cmd_evaluate(args) -> int:
    truth = [r for r in read_annotations(args.truth) if not r.exclude]
    preds = read_annotations(args.pred)
    pred_by_key = {(r.image, r.side): r for r in preds}
    matched = []
    for rec in truth:
        if rec.landmarks.count != KNEE_LANDMARK_COUNT:
            continue
        key = (rec.image, rec.side)
        if key not in pred_by_key:
            raise ValueError(f"no prediction for {key[0]} side {key[1].value}")
        p = pred_by_key[key]
        if p.landmarks.count != rec.landmarks.count:
            raise ValueError(
                f"{key[0]} side {key[1].value}: prediction has {p.landmarks.count} "
                f"landmarks, truth has {rec.landmarks.count}"
            )
        matched.append((rec, p))
    if not matched:
        raise ValueError("no evaluable (16-landmark, non-excluded) rows")
    rows = []
    for rec, p in matched:
        err = radial_errors(
            p.landmarks.points[None], rec.landmarks.points[None], rec.spacing
        )[0]
        rows.append(err)
    errors = np.stack(rows)

    if args.folds > 1:
        splits = make_cv_splits([rec for rec, _ in matched], args.folds, seed=args.seed)
        fold_errors = [errors[va] for _, va in splits]
    else:
        fold_errors = [errors]
    subsets = None
    if args.subset:
        table = {
            "all": tuple(range(KNEE_LANDMARK_COUNT)),
            "ablation": ABLATION_SUBSET,
            "test": TEST_SUBSET,
        }
        subsets = {args.subset: table[args.subset]}
    report = fold_report(fold_errors, radii_mm=DEFAULT_RADII_MM, subsets=subsets)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_json(report, out_dir / "report.json")
        write_report_csv(report, out_dir / "report.csv")
        print(f"wrote {out_dir / 'report.json'} and {out_dir / 'report.csv'}")
    print(render_report(report))
    return 0


def ablation_rows() -> list[tuple[str, dict[str, str], bool]]:
    """The preset grid: (name, config overrides, needs_pretrained)."""
    rows: list[tuple[str, dict[str, str], bool]] = []
    for loss in ("wing", "l1", "l2", "elastic"):
        rows.append((f"loss-{loss}", {"train.loss": loss, "train.weight_decay": "1e-4"}, False))
    rows.append(("block-bottleneck", {"model.block": "bottleneck"}, False))
    for alpha in ("0.1", "0.5", "0.75", "1.0"):
        rows.append((
            f"mixup-{alpha}-wd",
            {"train.mixup_alpha": alpha, "train.weight_decay": "1e-4"},
            False,
        ))
    for alpha in ("0.1", "0.5", "0.75", "1.0"):
        rows.append((
            f"mixup-{alpha}",
            {"train.mixup_alpha": alpha, "train.weight_decay": "0"},
            False,
        ))
    rows.append(("no-dropout", {"model.dropout": "0"}, False))
    rows.append(("target-jitter", {"augment.enabled": "true", "augment.jitter_px": "1.0"}, False))
    for frac in ("0.05", "0.10", "0.25"):
        rows.append((
            f"cutout-{frac}",
            {"augment.enabled": "true", "augment.cutout_frac": frac},
            False,
        ))
    rows.append(("finetune", {}, True))
    return rows


def cmd_ablate(args) -> int:
    rows = ablation_rows()
    if args.rows:
        wanted = [w.strip() for w in args.rows.split(",") if w.strip()]
        names = {name for name, _, _ in rows}
        unknown = [w for w in wanted if w not in names]
        if unknown:
            raise ValueError(f"unknown ablation rows: {', '.join(unknown)}; valid: {', '.join(sorted(names))}")
        rows = [r for r in rows if r[0] in wanted]
    base = _load_flat(args)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    summary = []
    for name, overrides, needs_pretrained in rows:
        if needs_pretrained and not args.pretrained:
            raise ValueError(f"row {name!r} needs --pretrained")
        flat = apply_overrides(dict(base), [f"{k}={v}" for k, v in overrides.items()])
        row_args = argparse.Namespace(
            data=args.data, out=out_root / name, folds=args.folds, fold=args.fold,
            pretrained=args.pretrained if needs_pretrained else None, quiet=args.quiet,
        )
        print(f"=== {name} ===")
        _run_training(row_args, "landmarks", flat)
        summary.append(name)
    print(f"completed rows: {', '.join(summary)}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")


def _add_train_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="corpus directory (holds annotations.csv)")
    p.add_argument("--out", required=True, help="output directory (checkpoint/, history.csv)")
    p.add_argument("--folds", type=int, default=0, help="cross-validation folds (0 = train on everything)")
    p.add_argument("--fold", type=int, default=0, help="which fold to hold out for validation")
    p.add_argument("--quiet", action="store_true", help="suppress the per-epoch log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kneemark", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a synthetic annotated corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--patients", type=int, default=16)
    p.add_argument("--bilateral", action="store_true", help="two-knee composites instead of single knees")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train-roi", help="train the joint-center model")
    _add_common(p)
    _add_train_common(p)
    p.set_defaults(func=cmd_train_roi)

    p = sub.add_parser("train-landmarks", help="train the landmark model")
    _add_common(p)
    _add_train_common(p)
    p.add_argument("--pretrained", help="checkpoint to transfer the trunk from")
    p.set_defaults(func=cmd_train_landmarks)

    p = sub.add_parser("infer", help="run the two-stage pipeline over a corpus")
    _add_common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--lm", required=True, help="landmark model checkpoint")
    p.add_argument("--roi", help="joint-center model checkpoint")
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--stages", type=int, choices=(1, 2), default=None,
                   help="landmark passes: 1 = single crop, 2 = re-centered second crop")
    p.add_argument("--gt-centers", action="store_true", help="crop at the annotated centers (skip stage one)")
    p.add_argument("--bilateral", action="store_true", help="corpus images hold two knees")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--truth", required=True, help="ground-truth annotations.csv")
    p.add_argument("--pred", required=True, help="prediction CSV from `infer`")
    p.add_argument("--out", help="directory for report.json / report.csv")
    p.add_argument("--subset", choices=("all", "ablation", "test"),
                   help="report a single landmark subset")
    p.add_argument("--folds", type=int, default=1, help="aggregate over this many patient folds")
    p.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the preset ablation grid")
    _add_common(p)
    _add_train_common(p)
    p.add_argument("--rows", help="comma-separated row names (default: all)")
    p.add_argument("--pretrained", help="trunk checkpoint for the finetune row")
    p.set_defaults(func=cmd_ablate, folds=2)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
