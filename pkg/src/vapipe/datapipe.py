"""Annotation I/O, label balancing, window construction, interpolation and
image preprocessing/augmentation.

Valence/arousal histograms are 40x40 over [-1, 1]^2 with valence on the
columns and arousal on the rows.
"""
import csv
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError

N_BINS = 40
ANNOTATION_HEADER = ("video_id", "frame_idx", "valence", "arousal", "face_detected", "image_path")
PREDICTION_HEADER = ("video_id", "frame_idx", "valence", "arousal", "interpolated")
LABELS_HEADER = ("image_path", "label")
FEATURE_MAGIC = b"VAF1"
LUMA = (0.299, 0.587, 0.114)

TARGETS = ("max_bin", "mean_bin", "midpoint")
MODES = ("balance", "literal")


@dataclass
class FrameRecord:
    video_id: str
    frame_idx: int
    valence: Optional[float]
    arousal: Optional[float]
    face_detected: bool = True
    image_ref: Union[str, np.ndarray, None] = None

    @property
    def labeled(self):
        return self.valence is not None and self.arousal is not None

    def key(self):
        return (self.video_id, self.frame_idx)


# -- annotation CSV ---------------------------------------------------------

def _parse_label(text, lineno, field):
    text = text.strip()
    if text == "":
        return None
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: {field} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {lineno}: {field} is not finite")
    return v


def load_annotations(path):
    """Parse an annotation CSV into records sorted by (video_id, frame_idx)."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open annotations {path}: {exc.strerror}") from exc
    records = []
    seen = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise DataError(f"{path}: line 1: expected header {','.join(ANNOTATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(ANNOTATION_HEADER):
                raise DataError(f"{path}: line {lineno}: expected 6 fields, got {len(row)}")
            vid, fidx, val, aro, det, img = (c.strip() for c in row)
            try:
                fidx = int(fidx)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: bad frame_idx {fidx!r}") from None
            if fidx < 0:
                raise DataError(f"{path}: line {lineno}: negative frame_idx")
            if det not in ("0", "1"):
                raise DataError(f"{path}: line {lineno}: face_detected must be 0 or 1")
            try:
                v = _parse_label(val, lineno, "valence")
                a = _parse_label(aro, lineno, "arousal")
            except DataError as exc:
                raise DataError(f"{path}: {exc}") from None
            if (v is None) != (a is None):
                raise DataError(f"{path}: line {lineno}: valence and arousal must both be present or both empty")
            if (vid, fidx) in seen:
                raise DataError(f"{path}: line {lineno}: duplicate frame ({vid}, {fidx})")
            seen.add((vid, fidx))
            records.append(FrameRecord(vid, fidx, v, a, det == "1", img or None))
    records.sort(key=FrameRecord.key)
    return records


def _fmt(v):
    return "" if v is None else repr(float(v))


def save_annotations(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for r in records:
            ref = r.image_ref if isinstance(r.image_ref, str) else ""
            w.writerow([r.video_id, r.frame_idx, _fmt(r.valence), _fmt(r.arousal),
                        int(bool(r.face_detected)), ref])


def load_labeled_images(path):
    """Classification index CSV (``image_path,label``) -> (paths, labels)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from exc
    if not rows or tuple(c.strip() for c in rows[0]) != LABELS_HEADER:
        raise DataError(f"{path}: line 1: expected header {','.join(LABELS_HEADER)}")
    paths, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            paths.append(row[0].strip())
            labels.append(int(row[1]))
        except (IndexError, ValueError):
            raise DataError(f"{path}: line {lineno}: malformed row") from None
    return paths, np.array(labels, dtype=np.int64)


def save_labeled_images(path, paths, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for p, y in zip(paths, labels):
            w.writerow([p, int(y)])


# -- filtering and histograms -----------------------------------------------

def filter_zero_va(records):
    """Drop frames whose valence and arousal are both exactly zero."""
    return [r for r in records if not (r.valence == 0 and r.arousal == 0)]


def bin_index(v):
    """Bin of a label in [-1, 1]; 1.0 folds into the last bin."""
    return np.minimum(np.floor((np.asarray(v, dtype=np.float64) + 1.0) * (N_BINS / 2)), N_BINS - 1).astype(np.intp)


@dataclass
class BinHistogram:
    counts: np.ndarray  # (arousal bin, valence bin)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def max_count(self):
        return int(self.counts.max())

    @property
    def mean_nonempty(self):
        nz = self.counts[self.counts > 0]
        return float(nz.mean()) if nz.size else 0.0

    def counts_for(self, valence, arousal):
        return self.counts[bin_index(arousal), bin_index(valence)]

    def format(self, max_width=4):
        """Text rendering: one line per arousal bin, top row = highest arousal."""
        lines = []
        for row in self.counts[::-1]:
            lines.append(" ".join(f"{int(c):>{max_width}d}" for c in row))
        return "\n".join(lines)


def _labels(records):
    v = np.array([np.nan if r.valence is None else r.valence for r in records], dtype=np.float64)
    a = np.array([np.nan if r.arousal is None else r.arousal for r in records], dtype=np.float64)
    return v, a


def build_histogram(records):
    v, a = _labels(records)
    if np.isnan(v).any() or np.isnan(a).any():
        raise DataError("cannot bin unlabeled frames")
    if v.size and (np.abs(v).max() > 1 or np.abs(a).max() > 1):
        raise DataError("valence/arousal outside [-1, 1]")
    counts = np.zeros((N_BINS, N_BINS), dtype=np.int64)
    np.add.at(counts, (bin_index(a), bin_index(v)), 1)
    return BinHistogram(counts)


@dataclass(frozen=True)
class DownsamplePolicy:
    target: str = "midpoint"
    mode: str = "balance"
    seed: int = 0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def k_target(hist, target):
    kmax, kmean = hist.max_count, hist.mean_nonempty
    return {"max_bin": float(kmax), "mean_bin": kmean, "midpoint": 0.5 * (kmax + kmean)}[target]


def keep_probabilities(records, hist, policy):
    if hist.total == 0:
        raise DataError("empty histogram")
    v, a = _labels(records)
    k_cur = hist.counts_for(v, a).astype(np.float64)
    kt = k_target(hist, policy.target)
    if policy.mode == "balance":
        return np.minimum(1.0, kt / k_cur)
    return np.minimum(1.0, k_cur / kt)


def downsample(records, hist, policy: DownsamplePolicy):
    """Keep each record independently with its bin's selection probability.

    ``balance`` mode keeps with min(1, k_target / k_current), thinning dense
    bins; ``literal`` keeps with min(1, k_current / k_target).
    """
    if not records:
        if hist.total == 0:
            raise DataError("empty histogram")
        return []
    p = keep_probabilities(records, hist, policy)
    u = np.random.default_rng(policy.seed).random(len(records))
    return [r for r, keep in zip(records, u < p) if keep]


# -- windows ----------------------------------------------------------------

@dataclass
class VideoFeatures:
    video_id: str
    frame_idx: np.ndarray
    features: np.ndarray
    labels: np.ndarray  # (n, 2); NaN where unlabeled
    valid: np.ndarray   # face detected, labeled, feature present

    def __post_init__(self):
        n = len(self.frame_idx)
        if self.features.shape[0] != n or self.labels.shape != (n, 2) or self.valid.shape != (n,):
            raise ShapeError(f"video {self.video_id}: inconsistent per-frame array lengths")


@dataclass
class SequenceWindow:
    features: np.ndarray
    target_valence: float
    target_arousal: float
    video_id: str
    end_frame: int


def window_ends(frame_idx, valid, window):
    """Array positions t such that positions t-window+1 .. t+1 are present,
    consecutive in frame index, and valid."""
    frame_idx = np.asarray(frame_idx)
    valid = np.asarray(valid, dtype=bool)
    n = len(frame_idx)
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    # a run breaks at an invalid frame or a frame-index jump
    breaks = np.ones(n, dtype=bool)
    breaks[1:] = np.diff(frame_idx) != 1
    ends = []
    start = None
    for i in range(n + 1):
        if i == n or not valid[i] or breaks[i]:
            if start is not None:
                # run covers positions start..i-1; targets need one frame after the window
                ends.extend(range(start + window - 1, i - 1))
            start = i if i < n and valid[i] else None
        elif start is None:
            start = i
    return np.array(ends, dtype=np.intp)


def build_windows(videos, window=100):
    """Stride-1 windows over each video; the target is the next frame's labels."""
    out = []
    for vf in videos:
        for t in window_ends(vf.frame_idx, vf.valid, window):
            out.append(SequenceWindow(vf.features[t - window + 1:t + 1],
                                      float(vf.labels[t + 1, 0]), float(vf.labels[t + 1, 1]),
                                      vf.video_id, int(vf.frame_idx[t])))
    return out


def stack_windows(windows):
    """-> X (n, W, D) float32, Y (n, 2) float32."""
    if not windows:
        raise DataError("no windows")
    X = np.stack([w.features for w in windows]).astype(np.float32, copy=False)
    Y = np.array([[w.target_valence, w.target_arousal] for w in windows], dtype=np.float32)
    return X, Y


def group_videos(records, features=None, require_labels=True):
    """Group sorted records into VideoFeatures. ``features`` maps
    (video_id, frame_idx) -> vector; frames without one are invalid, as are
    unlabeled frames unless ``require_labels`` is off (prediction time)."""
    dim = next((len(v) for v in features.values()), 0) if features else 0
    groups = {}
    for r in records:
        groups.setdefault(r.video_id, []).append(r)
    out = []
    for vid in sorted(groups):
        recs = groups[vid]
        fidx = np.array([r.frame_idx for r in recs], dtype=np.int64)
        labels = np.array([[np.nan if r.valence is None else r.valence,
                            np.nan if r.arousal is None else r.arousal] for r in recs], dtype=np.float64)
        feats = np.zeros((len(recs), dim), dtype=np.float32)
        has = np.zeros(len(recs), dtype=bool)
        if features:
            for i, r in enumerate(recs):
                vec = features.get((vid, r.frame_idx))
                if vec is not None:
                    feats[i] = vec
                    has[i] = True
        valid = has & np.array([r.face_detected and (r.labeled or not require_labels) for r in recs], dtype=bool)
        out.append(VideoFeatures(vid, fidx, feats, labels, valid))
    return out


# -- interpolation ----------------------------------------------------------

def interpolate_missing(frame_idx, values):
    """Fill NaN entries by linear interpolation over frame index; leading and
    trailing gaps copy the nearest prediction. Returns ``(filled, was_missing)``."""
    frame_idx = np.asarray(frame_idx, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    missing = np.isnan(values).any(axis=1)
    if missing.all():
        raise DataError("cannot interpolate a video with no predicted frames")
    filled = values.copy()
    if missing.any():
        for c in range(values.shape[1]):
            filled[missing, c] = np.interp(frame_idx[missing], frame_idx[~missing], values[~missing, c])
    return (filled[:, 0] if squeeze else filled), missing


def write_predictions(path, video_ids, frame_idx, preds, interpolated):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for vid, f, p, m in zip(video_ids, frame_idx, preds, interpolated):
            w.writerow([vid, int(f), repr(float(p[0])), repr(float(p[1])), int(bool(m))])


# -- feature files ----------------------------------------------------------

def write_features(path, video_ids, frame_idx, feats):
    """VAF1: magic, u32 count, u32 dim, then per record (u32 id length, id
    bytes, u32 frame_idx, dim x float32), all little-endian."""
    feats = np.asarray(feats)
    n, dim = feats.shape
    if len(video_ids) != n or len(frame_idx) != n:
        raise ShapeError("feature file: ids, frame indices and vectors differ in length")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", n, dim))
        rows = np.ascontiguousarray(feats, dtype="<f4")
        for vid, f, row in zip(video_ids, frame_idx, rows):
            b = vid.encode("utf-8")
            fh.write(struct.pack("<I", len(b)) + b + struct.pack("<I", int(f)))
            fh.write(row.tobytes())


def read_features(path):
    """-> (video_ids, frame_idx int64 array, features float32 (n, dim))."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc.strerror}") from exc
    if data[:4] != FEATURE_MAGIC or len(data) < 12:
        raise DataError(f"{path}: not a feature file")
    n, dim = struct.unpack_from("<II", data, 4)
    pos = 12
    ids, fidx = [], np.empty(n, dtype=np.int64)
    feats = np.empty((n, dim), dtype=np.float32)
    try:
        for i in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            ids.append(data[pos + 4:pos + 4 + ln].decode("utf-8"))
            pos += 4 + ln
            (fidx[i],) = struct.unpack_from("<I", data, pos)
            pos += 4
            feats[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated feature file") from exc
    return ids, fidx, feats


# -- images -----------------------------------------------------------------

def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape

    def axis(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    y0, y1, wy = axis(H, out_h)
    x0, x1, wx = axis(W, out_w)
    wy = wy[:, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(raw, size=96):
    """Pre-cropped face image -> (size, size) float32 grayscale in [0, 1]."""
    img = np.asarray(raw)
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / np.iinfo(img.dtype).max
    else:
        img = img.astype(np.float64)
    if img.ndim == 3:
        if img.shape[2] not in (3, 4):
            raise ShapeError(f"expected 3 or 4 colour channels, got {img.shape[2]}")
        img = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    elif img.ndim != 2:
        raise ShapeError(f"expected a 2-D or 3-D image, got shape {img.shape}")
    if img.shape != (size, size):
        img = resize_bilinear(img, size, size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def load_image(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def save_image(path, img):
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    from PIL import Image

    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def frame_image(record, root, size):
    ref = record.image_ref
    if ref is None:
        raise DataError(f"frame ({record.video_id}, {record.frame_idx}) has no image")
    raw = ref if isinstance(ref, np.ndarray) else load_image(Path(root) / ref)
    return preprocess_image(raw, size)


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    shift_x: float = 0.0  # fraction of width
    shift_y: float = 0.0  # fraction of height
    shear_deg: float = 0.0
    rotation_deg: float = 0.0
    flip: bool = False
    brightness: float = 0.0

    @property
    def is_identity_geometry(self):
        return (self.scale == 1.0 and self.shift_x == 0.0 and self.shift_y == 0.0
                and self.shear_deg == 0.0 and self.rotation_deg == 0.0)


@dataclass(frozen=True)
class AugmentRanges:
    scale: tuple = (0.9, 1.1)
    shift: float = 0.10
    shear_deg: float = 10.0
    rotation_deg: float = 15.0
    flip_prob: float = 0.5
    brightness: float = 0.10


def sample_augment(rng, ranges=AugmentRanges()):
    rng = np.random.default_rng(rng)
    return AugmentParams(
        scale=float(rng.uniform(*ranges.scale)),
        shift_x=float(rng.uniform(-ranges.shift, ranges.shift)),
        shift_y=float(rng.uniform(-ranges.shift, ranges.shift)),
        shear_deg=float(rng.uniform(-ranges.shear_deg, ranges.shear_deg)),
        rotation_deg=float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
        flip=bool(rng.random() < ranges.flip_prob),
        brightness=float(rng.uniform(-ranges.brightness, ranges.brightness)),
    )


def hflip(img):
    return img[..., ::-1].copy()


def augment(image, params: Optional[AugmentParams] = None, seed=None, ranges=AugmentRanges()):
    """Scale, shift, shear and rotate about the centre (one bilinear resample,
    zero fill), then optional horizontal flip, then brightness with clamping.

    Pass explicit ``params`` or a ``seed``/Generator to draw them from ``ranges``.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"augment expects a square 2-D image, got shape {img.shape}")
    if params is None:
        params = sample_augment(seed, ranges)
    out = img
    if not params.is_identity_geometry:
        n = img.shape[0]
        centre = np.array([(n - 1) / 2.0, (n - 1) / 2.0])
        sc = np.diag([params.scale, params.scale])
        sh = np.array([[1.0, 0.0], [math.tan(math.radians(params.shear_deg)), 1.0]])
        th = math.radians(params.rotation_deg)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        shift = np.array([params.shift_y * n, params.shift_x * n])
        # forward map (row, col): p' = rot @ sh @ (sc @ (p - c) + shift) + c
        fwd = rot @ sh
        inv = np.linalg.inv(fwd @ sc)
        offset = centre - inv @ (centre + fwd @ shift)
        out = ndimage.affine_transform(img.astype(np.float64), inv, offset=offset, order=1,
                                       mode="constant", cval=0.0)
    if params.flip:
        out = hflip(out)
    if params.brightness != 0.0:
        out = np.clip(out + params.brightness, 0.0, 1.0)
    if out is img:
        return img.copy()
    return out.astype(img.dtype, copy=False)


def frame_seed(global_seed, video_id, frame_idx):
    """Per-frame seed independent of processing order."""
    return np.random.SeedSequence([int(global_seed), zlib.crc32(video_id.encode("utf-8")), int(frame_idx)])


def augment_batch(batch, rng, ranges=AugmentRanges()):
    """Augment a (B, 1, S, S) training batch with draws from ``rng``."""
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        out[i, 0] = augment(batch[i, 0], sample_augment(rng, ranges))
    return out
