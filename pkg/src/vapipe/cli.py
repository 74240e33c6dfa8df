"""Command-line driver: generate -> balance -> train-cnn -> extract-features
-> train-rnn -> evaluate -> report.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datapipe as dp
from . import objectives as obj
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import CNN, CNNSpec
from .config import RunConfig, parse_overrides
from .errors import CheckpointKindError, ConfigError, DataError, NumericalError, ShapeError
from .optim import TrainConfig, TrainLog, train
from .recurrent import RNN, RnnSpec, stack_for
from .synthgen import CK_TRAIN_COUNTS, SynthConfig, gen_classification_set, gen_heavy_tailed_va, \
    gen_va_videos, write_classification_set, write_va_dataset

log = logging.getLogger("vapipe")

RESOLVED_NAME = "resolved_config.txt"


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(cfg, batch_default, loss_default):
    """TrainConfig from the run config; fills in the command's batch size and
    loss so the dumped config is complete."""
    if cfg["batch_size"] is None:
        cfg["batch_size"] = batch_default
    if cfg["loss"] is None:
        cfg["loss"] = loss_default
    return TrainConfig(
        lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        max_epochs=cfg["max_epochs"], batch_size=cfg["batch_size"],
        early_stop_patience=cfg["early_stop_patience"], seed=cfg["seed"], loss=cfg["loss"],
    )


def _is_label_index(path):
    try:
        with open(path) as fh:
            return fh.readline().strip().replace(" ", "") == ",".join(dp.LABELS_HEADER)
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from exc


def _print_log_row(row):
    extra = (f"acc {row['val_accuracy']:.4f}" if row["val_accuracy"] is not None
             else f"ccc v {row['val_ccc_v']:.4f} a {row['val_ccc_a']:.4f}")
    print(f"epoch {row['epoch']:3d}  train {row['train_loss']:.5f}  val {row['val_loss']:.5f}  {extra}")


# -- data loading -------------------------------------------------------------

def load_regression_frames(csv_path, size):
    """Labeled, face-detected frames -> (records, X (N,1,S,S), Y (N,2))."""
    root = Path(csv_path).parent
    recs = [r for r in dp.load_annotations(csv_path) if r.face_detected and r.labeled and r.image_ref]
    if not recs:
        raise DataError(f"{csv_path}: no labeled, face-detected frames with images")
    X = np.stack([dp.frame_image(r, root, size) for r in recs])[:, None]
    Y = np.array([[r.valence, r.arousal] for r in recs], dtype=np.float32)
    return recs, X, Y


def load_classification(csv_path, size):
    root = Path(csv_path).parent
    paths, labels = dp.load_labeled_images(csv_path)
    if not paths:
        raise DataError(f"{csv_path}: no images")
    X = np.stack([dp.preprocess_image(dp.load_image(root / p), size) for p in paths])[:, None]
    return X, labels


def eligible_frames(records, root, size):
    """Face-detected frames whose image loads; returns (records, images)."""
    keep, imgs = [], []
    for r in records:
        if not r.face_detected or r.image_ref is None:
            continue
        try:
            imgs.append(dp.frame_image(r, root, size))
        except (DataError, ShapeError) as exc:
            log.warning("skipping frame (%s, %d): %s", r.video_id, r.frame_idx, exc)
            continue
        keep.append(r)
    return keep, (np.stack(imgs)[:, None] if imgs else np.zeros((0, 1, size, size), np.float32))


def feature_windows(feature_path, csv_path, window):
    ids, fidx, feats = dp.read_features(feature_path)
    fmap = {(v, int(f)): feats[i] for i, (v, f) in enumerate(zip(ids, fidx))}
    videos = dp.group_videos(dp.load_annotations(csv_path), fmap)
    windows = dp.build_windows(videos, window)
    if not windows:
        raise DataError(f"{feature_path}: no complete windows of length {window}")
    X, Y = dp.stack_windows(windows)
    return X, Y, feats.shape[1]


# -- commands -----------------------------------------------------------------

def cmd_generate(args, cfg):
    out = _out_dir(args.out)
    sc = SynthConfig(
        n_videos=cfg["n_videos"], frames_per_video=cfg["frames_per_video"], image_size=cfg["image_size"],
        seed=cfg["seed"], temporal_lag=cfg["temporal_lag"], walk_step=cfg["walk_step"],
        missing_fraction=cfg["missing_fraction"], pixel_noise=cfg["pixel_noise"], n_samples=cfg["n_samples"],
        class_weights=_class_weights(cfg["class_weights"]), exact_counts=cfg["exact_counts"],
        noise=cfg["noise"], jitter_deg=cfg["jitter_deg"], tail_mass=cfg["tail_mass"], mode_spread=cfg["mode_spread"],
        zero_fraction=cfg["zero_fraction"],
    )
    kind = cfg["kind"]
    if kind == "va":
        recs, _, _ = gen_va_videos(sc)
        path = write_va_dataset(out, recs)
        print(f"wrote {len(recs)} frames from {sc.n_videos} videos to {path}")
    elif kind == "classification":
        imgs, labels = gen_classification_set(sc)
        path = write_classification_set(out, imgs, labels)
        print(f"wrote {len(labels)} images to {path}; class counts {np.bincount(labels, minlength=8).tolist()}")
    elif kind == "heavy-tailed":
        recs = gen_heavy_tailed_va(sc)
        path = out / "annotations.csv"
        dp.save_annotations(path, recs)
        print(f"wrote {len(recs)} labels to {path}")
    else:
        raise ConfigError(f"kind must be va, classification or heavy-tailed, got {kind!r}")
    cfg.dump(out / RESOLVED_NAME)
    return 0


def _class_weights(spec):
    if spec == "uniform":
        return None
    if spec == "ck":
        c = np.array(CK_TRAIN_COUNTS, dtype=np.float64)
        return tuple(c / c.sum())
    return spec


def cmd_balance(args, cfg):
    src = Path(args.annotations)
    records = dp.load_annotations(src)
    labeled = [r for r in records if r.labeled]
    filtered = dp.filter_zero_va(labeled)
    hist = dp.build_histogram(filtered)
    policy = dp.DownsamplePolicy(cfg["target"].replace("-", "_"), cfg["mode"], cfg["seed"])
    kept = dp.downsample(filtered, hist, policy)
    after = dp.build_histogram(kept) if kept else dp.BinHistogram(np.zeros_like(hist.counts))
    out = _out_dir(args.out)
    rebased = []
    for r in kept:
        ref = r.image_ref
        if isinstance(ref, str) and not os.path.isabs(ref):
            ref = os.path.relpath(src.parent / ref, out)
        rebased.append(dp.FrameRecord(r.video_id, r.frame_idx, r.valence, r.arousal, r.face_detected, ref))
    dp.save_annotations(out / "annotations.csv", rebased)
    report = [
        f"input frames: {len(records)}",
        f"labeled frames: {len(labeled)}",
        f"after zero-VA filter: {len(filtered)}",
        f"target: {policy.target}  mode: {policy.mode}  k_target: {dp.k_target(hist, policy.target):.3f}",
        f"output frames: {len(kept)}",
        "", "histogram before (rows = arousal, top = +1; cols = valence, left = -1):", hist.format(),
        "", "histogram after:", after.format(),
    ]
    text = "\n".join(report) + "\n"
    (out / "histograms.txt").write_text(text)
    # the grids are long; the summary goes to stdout, the full text to the file
    print(text if args.verbose else "\n".join(report[:5] + [f"histograms: {out / 'histograms.txt'}"]) + "\n", end="")
    cfg.dump(out / RESOLVED_NAME)
    return 0


def cmd_train_cnn(args, cfg):
    spec = CNNSpec(head=cfg["head"], image_size=cfg["image_size"], filters=cfg["filters"],
                   fc_units=cfg["fc_units"])
    if spec.head == "classification":
        X, Y = load_classification(args.data, spec.image_size)
        Xv, Yv = load_classification(args.val, spec.image_size) if args.val else (X, Y)
        tc = _train_config(cfg, 64, "cross_entropy")
        if tc.loss != "cross_entropy":
            raise ConfigError("classification head trains with loss = cross_entropy")
    else:
        if _is_label_index(args.data):
            raise ConfigError(f"{args.data} is a classification index; set head = classification")
        _, X, Y = load_regression_frames(args.data, spec.image_size)
        _, Xv, Yv = load_regression_frames(args.val, spec.image_size) if args.val else (None, X, Y)
        tc = _train_config(cfg, 64, "ccc")
        if tc.loss == "cross_entropy":
            raise ConfigError("regression head trains with loss = ccc or mse")
    if not args.val:
        print("no --val given: the training set doubles as the validation set")
    model = CNN(spec, seed=cfg["seed"])
    augment = dp.augment_batch if cfg["augment"] else None
    _, tlog = train(model, (X, Y), (Xv, Yv), tc, augment=augment, on_epoch=_print_log_row)
    return _finish_training(args, cfg, model, tlog, tc)


def _finish_training(args, cfg, model, tlog, tc):
    out = _out_dir(args.out)
    save_checkpoint(out / "checkpoint.val", model, tc)
    tlog.to_csv(out / "train_log.csv")
    cfg.dump(out / RESOLVED_NAME)
    print(f"best epoch {tlog.best_epoch} of {tlog.epochs_run}, val loss {tlog.best_val_loss:.6f}")
    print(f"checkpoint: {out / 'checkpoint.val'}")
    return 0


def cmd_extract(args, cfg):
    cnn = load_checkpoint(args.checkpoint, expect="cnn")
    src = Path(args.annotations)
    recs, X = eligible_frames(dp.load_annotations(src), src.parent, cnn.spec.image_size)
    feats = cnn.features(X)
    out = _out_dir(args.out)
    dp.write_features(out / "features.vaf", [r.video_id for r in recs], [r.frame_idx for r in recs], feats)
    cfg.dump(out / RESOLVED_NAME)
    print(f"wrote {len(recs)} feature vectors of size {feats.shape[1]} to {out / 'features.vaf'}")
    return 0


def cmd_train_rnn(args, cfg):
    window = cfg["window"]
    X, Y, dim = feature_windows(args.features, args.annotations, window)
    if args.val_features:
        if not args.val_annotations:
            raise ConfigError("--val-features needs --val-annotations")
        Xv, Yv, _ = feature_windows(args.val_features, args.val_annotations, window)
    else:
        print("no validation features given: the training windows double as the validation set")
        Xv, Yv = X, Y
    spec = RnnSpec(cell=cfg["cell"], layers=stack_for(cfg["layers"]), input_dim=dim, window=window)
    tc = _train_config(cfg, 128, "ccc")
    if tc.loss == "cross_entropy":
        raise ConfigError("the recurrent stage trains with loss = ccc or mse")
    print(f"{len(X)} training windows, cell {spec.cell}, layers {list(spec.layers)}")
    model = RNN(spec, seed=cfg["seed"])
    _, tlog = train(model, (X, Y), (Xv, Yv), tc, on_epoch=_print_log_row)
    return _finish_training(args, cfg, model, tlog, tc)


def predict_frames(cnn, rnn, records, root):
    """Per-frame (valence, arousal) predictions for every record; NaN where
    the model cannot predict."""
    recs, X = eligible_frames(records, root, cnn.spec.image_size)
    pred = {}
    if rnn is None:
        for r, p in zip(recs, cnn.predict(X)):
            pred[r.key()] = p
    else:
        fmap = {r.key(): f for r, f in zip(recs, cnn.features(X))}
        videos = dp.group_videos(records, fmap, require_labels=False)
        windows = dp.build_windows(videos, rnn.spec.window)
        if windows:
            W, _ = dp.stack_windows(windows)
            next_idx = {(v.video_id, int(v.frame_idx[i])): (v.video_id, int(v.frame_idx[i + 1]))
                        for v in videos for i in range(len(v.frame_idx) - 1)}
            for w, p in zip(windows, rnn.predict(W)):
                pred[next_idx[(w.video_id, w.end_frame)]] = p
    return np.array([pred.get(r.key(), (np.nan, np.nan)) for r in records], dtype=np.float64)


def cmd_evaluate(args, cfg):
    cnn = load_checkpoint(args.checkpoint, expect="cnn")
    rnn = load_checkpoint(args.rnn, expect="rnn") if args.rnn else None
    out = _out_dir(args.out)
    classification_data = _is_label_index(args.data)
    if cnn.spec.head == "classification":
        if not classification_data or rnn is not None:
            raise CheckpointKindError("classification checkpoint needs a classification index (image_path,label)"
                                      " and no recurrent stage")
        X, y = load_classification(args.data, cnn.spec.image_size)
        cm, acc = obj.confusion_and_accuracy(cnn.predict(X).argmax(axis=1), y, cnn.spec.n_outputs)
        metrics = {"accuracy": acc}
        recall = obj.per_class_recall(cm)
        print(obj.format_report(metrics, cm))
        print("per-class recall: " + " ".join("nan" if np.isnan(r) else f"{r:.3f}" for r in recall))
        obj.write_metrics(out / "metrics.txt", metrics, cm)
        cfg.dump(out / RESOLVED_NAME)
        return 0
    if classification_data:
        raise CheckpointKindError("regression checkpoint cannot be scored on a classification index")
    src = Path(args.data)
    records = dp.load_annotations(src)
    raw = predict_frames(cnn, rnn, records, src.parent)
    vids = np.array([r.video_id for r in records])
    filled = np.full_like(raw, np.nan)
    interp = np.zeros(len(records), dtype=bool)
    for vid in dict.fromkeys(vids):
        sel = np.flatnonzero(vids == vid)
        if np.isnan(raw[sel]).all():
            print(f"warning: video {vid} has no predictable frames; excluded", file=sys.stderr)
            continue
        filled[sel], interp[sel] = dp.interpolate_missing([records[i].frame_idx for i in sel], raw[sel])
    scored = np.array([r.labeled for r in records]) & ~np.isnan(filled[:, 0])
    if scored.sum() < 2:
        raise DataError("fewer than two labeled frames with predictions")
    labels = np.array([[r.valence, r.arousal] for r in records], dtype=np.float64)
    metrics = obj.regression_metrics(filled[scored], labels[scored])
    keep = ~np.isnan(filled[:, 0])
    dp.write_predictions(out / "predictions.csv", vids[keep], [r.frame_idx for r, k in zip(records, keep) if k],
                         filled[keep], interp[keep])
    obj.write_metrics(out / "metrics.txt", metrics)
    cfg.dump(out / RESOLVED_NAME)
    print(obj.format_report(metrics))
    print(f"scored frames: {int(scored.sum())} ({int((interp & scored).sum())} interpolated)")
    return 0


def cmd_report(args, cfg):
    rows = []
    for path in args.inputs:
        p = Path(path)
        metrics_path = p / "metrics.txt" if p.is_dir() else p
        if not metrics_path.exists():
            raise DataError(f"no metrics file at {metrics_path}")
        m = obj.read_metrics(metrics_path)
        log_path = metrics_path.parent / "train_log.csv"
        best = TrainLog.from_csv(log_path).best_epoch if log_path.exists() else None
        rows.append((p.name if p.is_dir() else p.parent.name or p.name, m, best))
    cols = ("valence_rmse", "arousal_rmse", "valence_ccc", "arousal_ccc", "accuracy")
    shown = [c for c in cols if any(c in m for _, m, _ in rows)]
    width = max([len(n) for n, _, _ in rows] + [6])
    lines = [f"{'run':<{width}s}  " + "  ".join(f"{c:>12s}" for c in shown) + "  best_epoch"]
    for name, m, best in rows:
        vals = "  ".join(f"{m[c]:12.4f}" if c in m else f"{'-':>12s}" for c in shown)
        lines.append(f"{name:<{width}s}  {vals}  {best if best is not None else '-':>10}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


# -- argument parsing ---------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (default: $VA_SEED or 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vapipe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--kind", choices=("va", "classification", "heavy-tailed"))
    g.add_argument("--out", required=True)

    b = sub.add_parser("balance", parents=[common], help="zero-VA filter + histogram downsampling")
    b.add_argument("--annotations", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--target", choices=("max-bin", "mean-bin", "midpoint"))
    b.add_argument("--mode", choices=("balance", "literal"))

    t = sub.add_parser("train-cnn", parents=[common], help="train the frame CNN")
    t.add_argument("--data", required=True, help="annotation CSV, or image_path,label index for classification")
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    t.add_argument("--head", choices=("regression", "classification"))

    e = sub.add_parser("extract-features", parents=[common], help="write FC-layer features for every frame")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--out", required=True)

    r = sub.add_parser("train-rnn", parents=[common], help="train the recurrent stage on feature windows")
    r.add_argument("--features", required=True)
    r.add_argument("--annotations", required=True)
    r.add_argument("--val-features")
    r.add_argument("--val-annotations")
    r.add_argument("--out", required=True)
    r.add_argument("--cell", choices=("simple", "gru"))
    r.add_argument("--layers", type=int, choices=(1, 3))
    r.add_argument("--window", type=int)

    v = sub.add_parser("evaluate", parents=[common], help="score a CNN or CNN+RNN")
    v.add_argument("--checkpoint", required=True, help="CNN checkpoint")
    v.add_argument("--rnn", help="recurrent checkpoint (CNN+RNN evaluation)")
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)

    rp = sub.add_parser("report", parents=[common], help="tabulate metrics from evaluate runs")
    rp.add_argument("inputs", nargs="+", help="evaluate output directories or metrics files")
    rp.add_argument("--out")
    return p


COMMANDS = {
    "generate": cmd_generate, "balance": cmd_balance, "train-cnn": cmd_train_cnn,
    "extract-features": cmd_extract, "train-rnn": cmd_train_rnn, "evaluate": cmd_evaluate,
    "report": cmd_report,
}

_FLAG_KEYS = ("seed", "kind", "target", "mode", "head", "cell", "layers", "window")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        overrides.update({k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k, None) is not None})
        cfg = RunConfig.resolve(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
