"""Deterministic synthetic stand-ins for the real corpora.

* VA videos: a bright rectangle whose horizontal position encodes valence and
  whose intensity encodes arousal, following a clipped random walk. With
  ``temporal_lag`` > 0 the label at frame t is the latent value shown at
  frame t - lag, so only a model with memory can recover it. Optional
  Gaussian pixel noise makes single frames unreliable.
* Classification: eight oriented-bar glyphs under heavy noise, with
  configurable class frequencies.
* Heavy-tailed VA labels for the balancing procedure.
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .datapipe import FrameRecord, save_annotations, save_image, save_labeled_images
from .errors import ConfigError

N_CLASSES = 8
# Train-folder class counts of the CK+ split used for the imbalance study
# (neutral, anger, contempt, disgust, fear, happy, sadness, surprise).
CK_TRAIN_COUNTS = (295, 129, 51, 153, 60, 186, 84, 219)


@dataclass
class SynthConfig:
    n_videos: int = 4
    frames_per_video: int = 200
    image_size: int = 96
    seed: int = 0
    temporal_lag: int = 5
    walk_step: float = 0.2
    missing_fraction: float = 0.0
    pixel_noise: float = 0.0
    # classification
    n_samples: int = 800
    class_weights: Optional[tuple] = None
    label_seed: Optional[int] = None
    exact_counts: bool = False
    noise: float = 0.35
    jitter_deg: float = 6.0
    # heavy-tailed labels
    tail_mass: float = 0.9
    mode_center: tuple = (0.6, 0.3)
    mode_spread: float = 0.25
    zero_fraction: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.tail_mass <= 1.0:
            raise ConfigError("tail_mass must be in [0, 1]")
        if self.temporal_lag < 0:
            raise ConfigError("temporal_lag must be >= 0")
        if self.image_size % 4:
            raise ConfigError("image_size must be a multiple of 4")
        if self.pixel_noise < 0:
            raise ConfigError("pixel_noise must be >= 0")
        if not 0.0 <= self.zero_fraction <= 1.0 or not 0.0 <= self.missing_fraction < 1.0:
            raise ConfigError("fractions must be in [0, 1]")

    @property
    def weights(self):
        w = np.full(N_CLASSES, 1.0 / N_CLASSES) if self.class_weights is None \
            else np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (N_CLASSES,) or (w < 0).any():
            raise ConfigError(f"class_weights must be {N_CLASSES} non-negative numbers")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"class_weights must sum to 1, got {w.sum()!r}")
        return w


# -- VA videos --------------------------------------------------------------

def render_va(valence, arousal, size):
    """Rectangle of width and height size/2, centred vertically, horizontal
    centre at size/2 + valence*size/4, intensity 0.5 + 0.4*arousal.
    Edge columns are area-weighted so the centroid is exact."""
    img = np.zeros((size, size), dtype=np.float32)
    half = size / 2.0
    centre = half + valence * size / 4.0
    left, right = centre - size / 4.0, centre + size / 4.0
    cols = np.arange(size)
    cover = np.clip(np.minimum(cols + 1, right) - np.maximum(cols, left), 0.0, 1.0)
    img[size // 4: 3 * size // 4] = (0.5 + 0.4 * arousal) * cover
    return img


def decode_va(img):
    """Closed-form inverse of :func:`render_va`."""
    img = np.asarray(img, dtype=np.float64)
    size = img.shape[-1]
    mass = img.sum(axis=-2)
    total = mass.sum(axis=-1)
    centroid = (mass * (np.arange(size) + 0.5)).sum(axis=-1) / total
    amp = total / (size / 2.0) ** 2
    return (centroid - size / 2.0) / (size / 4.0), (amp - 0.5) / 0.4


def _walk(rng, n, step):
    out = np.empty((n, 2))
    out[0] = rng.uniform(-0.5, 0.5, size=2)
    deltas = rng.uniform(-step, step, size=(n - 1, 2))
    for t in range(1, n):
        out[t] = np.clip(out[t - 1] + deltas[t - 1], -1.0, 1.0)
    return out


def gen_va_videos(cfg: SynthConfig):
    """Returns ``(records, images, latent)``: records sorted by video and
    frame, images (N, S, S) float32 in [0, 1], and the latent (valence,
    arousal) actually drawn in each frame. Each record's ``image_ref`` is its
    image."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_videos)
    lag, F, S = cfg.temporal_lag, cfg.frames_per_video, cfg.image_size
    records, images, latent = [], [], []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        path = _walk(rng, F + lag, cfg.walk_step)
        missing = rng.random(F) < cfg.missing_fraction
        vid = f"vid{i:03d}"
        for t in range(F):
            shown = path[t + lag]
            img = render_va(shown[0], shown[1], S)
            if cfg.pixel_noise:
                img = np.clip(img + rng.normal(0.0, cfg.pixel_noise, img.shape), 0.0, 1.0).astype(np.float32)
            label = path[t]
            ok = not missing[t]
            records.append(FrameRecord(vid, t, float(label[0]) if ok else None,
                                       float(label[1]) if ok else None, ok, img))
            images.append(img)
            latent.append(shown)
    return records, np.stack(images), np.array(latent)


def write_va_dataset(out_dir, records, annotations_name="annotations.csv"):
    """Write each in-memory frame as a PNG plus the annotation CSV."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        ref = r.image_ref
        if isinstance(ref, np.ndarray):
            rel = f"images/{r.video_id}_{r.frame_idx:06d}.png"
            save_image(out / rel, ref)
            ref = rel
        written.append(FrameRecord(r.video_id, r.frame_idx, r.valence, r.arousal, r.face_detected, ref))
    save_annotations(out / annotations_name, written)
    return out / annotations_name


# -- classification ---------------------------------------------------------

def _class_counts(weights, n, rng, exact):
    if exact:
        raw = weights * n
        counts = np.floor(raw).astype(np.int64)
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:n - counts.sum()]] += 1
        return counts
    return rng.multinomial(n, weights)


def render_glyph(label, size, angle_jitter=0.0, offset=(0.0, 0.0)):
    """Bar through the image centre at angle label * 22.5 degrees."""
    theta = math.radians(label * 180.0 / N_CLASSES + angle_jitter)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    y = yy - c - offset[0] * size
    x = xx - c - offset[1] * size
    along = x * math.cos(theta) + y * math.sin(theta)
    across = -x * math.sin(theta) + y * math.cos(theta)
    half_len, half_w = 0.38 * size, max(1.0, 0.06 * size)
    return ((np.abs(along) <= half_len) & (np.abs(across) <= half_w)).astype(np.float64) * 0.8


def gen_classification_set(cfg: SynthConfig):
    """Returns ``(images (N, S, S) float32, labels (N,) int64)``.

    Class counts are drawn with ``label_seed`` (falls back to ``seed``) so two
    noise seeds can share the same label draw.
    """
    w = cfg.weights
    label_seed = cfg.seed if cfg.label_seed is None else cfg.label_seed
    counts = _class_counts(w, cfg.n_samples, np.random.default_rng(label_seed), cfg.exact_counts)
    labels = np.repeat(np.arange(N_CLASSES), counts)
    labels = np.random.default_rng(label_seed).permutation(labels)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    S = cfg.image_size
    images = np.empty((len(labels), S, S), dtype=np.float32)
    for i, y in enumerate(labels):
        jitter = rng.uniform(-cfg.jitter_deg, cfg.jitter_deg)
        offset = rng.uniform(-0.05, 0.05, size=2)
        img = render_glyph(int(y), S, jitter, offset) + rng.normal(0.0, cfg.noise, size=(S, S))
        images[i] = np.clip(img + 0.1, 0.0, 1.0)
    return images, labels.astype(np.int64)


def write_classification_set(out_dir, images, labels, index_name="labels.csv"):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        rel = f"images/img_{i:06d}.png"
        save_image(out / rel, img)
        paths.append(rel)
    save_labeled_images(out / index_name, paths, labels)
    return out / index_name


# -- heavy-tailed labels ----------------------------------------------------

def gen_heavy_tailed_va(cfg: SynthConfig):
    """Label-only records: ``zero_fraction`` exact (0, 0) labels; of the rest,
    ``tail_mass`` drawn uniformly from a disk around ``mode_center`` and the
    remainder uniform over [-1, 1]^2."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    is_zero = rng.random(n) < cfg.zero_fraction
    in_mode = rng.random(n) < cfg.tail_mass
    # flat-topped mode: uniform over a disk of radius mode_spread
    radius = cfg.mode_spread * np.sqrt(rng.random(n))
    angle = rng.uniform(0.0, 2.0 * math.pi, size=n)
    mode = np.clip(np.asarray(cfg.mode_center) + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1),
                   -1.0, 1.0)
    uniform = rng.uniform(-1.0, 1.0, size=(n, 2))
    labels = np.where(in_mode[:, None], mode, uniform)
    labels[is_zero] = 0.0
    return [FrameRecord("synth", i, float(v), float(a), True, None) for i, (v, a) in enumerate(labels)]
