import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vapipe import datapipe as dp
from vapipe.errors import DataError, ShapeError

HEADER = "video_id,frame_idx,valence,arousal,face_detected,image_path\n"


def _rec(v, a, vid="s", idx=0):
    return dp.FrameRecord(vid, idx, v, a, True, None)


# -- annotations ---------------------------------------------------------------

def test_load_annotations_rows(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + "v1,1,,,0,\nv1,0,0.5,-0.25,1,img/0.png\nv0,3,0.1,0.2,1,x.png\n")
    recs = dp.load_annotations(p)
    assert [r.key() for r in recs] == [("v0", 3), ("v1", 0), ("v1", 1)]
    assert recs[1] == dp.FrameRecord("v1", 0, 0.5, -0.25, True, "img/0.png")
    assert recs[2].valence is None and recs[2].arousal is None and not recs[2].face_detected
    assert not recs[2].labeled


@pytest.mark.parametrize("body, where", [
    ("v1,0,abc,0.1,1,\n", "line 2"),
    ("v1,0,0.1,0.1,1,\nv1,1,0.1,0.1,2,\n", "line 3"),
    ("v1,0,0.1,0.1,1,\nv1,0,0.2,0.2,1,\n", "duplicate"),
    ("v1,x,0.1,0.1,1,\n", "frame_idx"),
    ("v1,0,0.1,,1,\n", "both"),
    ("v1,0,0.1,0.1\n", "6 fields"),
])
def test_load_annotations_errors(tmp_path, body, where):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + body)
    with pytest.raises(DataError, match=where):
        dp.load_annotations(p)


def test_annotation_roundtrip(tmp_path):
    recs = [dp.FrameRecord("a", 0, 0.125, -1.0, True, "i.png"), dp.FrameRecord("a", 2, None, None, False, None)]
    dp.save_annotations(tmp_path / "x.csv", recs)
    assert dp.load_annotations(tmp_path / "x.csv") == recs


def test_missing_annotation_file(tmp_path):
    with pytest.raises(DataError, match="nope.csv"):
        dp.load_annotations(tmp_path / "nope.csv")


# -- zero filter and histogram -----------------------------------------------

def test_filter_zero_va():
    recs = [_rec(0, 0), _rec(0, 0.1), _rec(0.3, 0)] + [_rec(0, 0)] * 2 + [_rec(0.5, 0.5)] * 5
    out = dp.filter_zero_va(recs)
    assert len(recs) == 10 and len(out) == 7
    assert dp.filter_zero_va(out) == out


def test_histogram_edges():
    h = dp.build_histogram([_rec(-1, -1)])
    assert h.counts[0, 0] == 1 and h.total == 1
    h = dp.build_histogram([_rec(1, 1)])
    assert h.counts[39, 39] == 1
    # valence on columns, arousal on rows
    h = dp.build_histogram([_rec(-1, 1)])
    assert h.counts[39, 0] == 1
    with pytest.raises(DataError):
        dp.build_histogram([_rec(1.2, 0)])


def test_histogram_matches_independent_binning():
    r = np.random.default_rng(0)
    vals = r.uniform(-1, 1, size=(1000, 2))
    h = dp.build_histogram([_rec(v, a) for v, a in vals])
    ref = np.zeros((40, 40), int)
    for v, a in vals:
        col = min(int(math.floor((v + 1) / 0.05)), 39)
        row = min(int(math.floor((a + 1) / 0.05)), 39)
        ref[row, col] += 1
    np.testing.assert_array_equal(h.counts, ref)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), max_size=100))
def test_histogram_total(labels):
    assert dp.build_histogram([_rec(v, a) for v, a in labels]).total == len(labels)


# -- downsampling --------------------------------------------------------------

def _heavy(n=3000, seed=0):
    r = np.random.default_rng(seed)
    hot = r.random(n) < 0.6
    vals = np.where(hot[:, None], 0.52, r.uniform(-1, 1, size=(n, 2)))
    return [_rec(v, a, idx=i) for i, (v, a) in enumerate(vals)]


def test_max_bin_balance_keeps_everything():
    recs = _heavy()
    h = dp.build_histogram(recs)
    assert dp.downsample(recs, h, dp.DownsamplePolicy("max_bin", "balance", 3)) == recs


def test_downsample_half_bin():
    recs = [_rec(0.5, 0.5, idx=i) for i in range(100)] + [_rec(-0.5, -0.5, idx=100 + i) for i in range(50)]
    recs += [_rec(0.9, -0.9, idx=200)]
    h = dp.build_histogram(recs)
    counts = []
    for seed in range(20):
        p = dp.keep_probabilities(recs, h, dp.DownsamplePolicy("mean_bin", "balance", seed))
        assert np.all(p <= 1)
        out = dp.downsample(recs, h, dp.DownsamplePolicy("mean_bin", "balance", seed))
        counts.append(sum(r.valence == 0.5 for r in out))
    # k_target = 151/3 over the three non-empty bins, so the 100-bin keeps ~50
    assert dp.k_target(h, "mean_bin") == pytest.approx(151 / 3)
    assert all(35 <= c <= 65 for c in counts)


def test_literal_mode_inverts_direction():
    recs = _heavy()
    h = dp.build_histogram(recs)
    pb = dp.keep_probabilities(recs, h, dp.DownsamplePolicy("midpoint", "balance"))
    pl = dp.keep_probabilities(recs, h, dp.DownsamplePolicy("midpoint", "literal"))
    hot = h.counts_for(*dp._labels(recs)) == h.max_count
    assert pb[hot].max() < 1 and pb[~hot].min() == 1
    assert pl[hot].min() == 1 and pl[~hot].max() < 1


def test_subset_size_ordering():
    recs = _heavy()
    h = dp.build_histogram(recs)
    sizes = {t: len(dp.downsample(recs, h, dp.DownsamplePolicy(t, "balance", 0))) for t in dp.TARGETS}
    assert sizes["mean_bin"] < sizes["midpoint"] < sizes["max_bin"] == len(recs)


def test_balance_reduces_skew():
    recs = _heavy()
    h = dp.build_histogram(recs)
    kt = dp.k_target(h, "midpoint")
    out = dp.downsample(recs, h, dp.DownsamplePolicy("midpoint", "balance", 1))
    after = dp.build_histogram(out)
    assert after.max_count <= kt + 3 * math.sqrt(kt)
    assert after.max_count / after.mean_nonempty < h.max_count / h.mean_nonempty


def test_downsample_empty_histogram():
    with pytest.raises(DataError):
        dp.downsample([], dp.BinHistogram(np.zeros((40, 40), int)), dp.DownsamplePolicy())


def test_downsample_deterministic():
    recs = _heavy()
    h = dp.build_histogram(recs)
    pol = dp.DownsamplePolicy("midpoint", "balance", 11)
    assert dp.downsample(recs, h, pol) == dp.downsample(recs, h, pol)


# -- windows -------------------------------------------------------------------

def _video(n, invalid=(), gaps=(), dim=3, vid="v"):
    fidx = np.arange(n)
    for g in gaps:
        fidx[g:] += 1
    feats = np.arange(n * dim, dtype=np.float32).reshape(n, dim)
    labels = np.stack([np.linspace(-1, 1, n), np.linspace(1, -1, n)], axis=1)
    valid = np.ones(n, bool)
    valid[list(invalid)] = False
    return dp.VideoFeatures(vid, fidx, feats, labels, valid)


def test_window_boundaries():
    assert len(dp.build_windows([_video(101)], 100)) == 1
    assert len(dp.build_windows([_video(100)], 100)) == 0
    assert len(dp.build_windows([_video(250, invalid=[125])], 100)) == 49


def test_window_content_and_target():
    vf = _video(12)
    ws = dp.build_windows([vf], 4)
    assert len(ws) == 8
    w = ws[2]
    assert w.end_frame == 5
    np.testing.assert_array_equal(w.features, vf.features[2:6])
    assert (w.target_valence, w.target_arousal) == (vf.labels[6, 0], vf.labels[6, 1])


def test_frame_index_gap_breaks_run():
    vf = _video(20, gaps=[10])  # frames 0..9 then 11..20
    ends = [w.end_frame for w in dp.build_windows([vf], 5)]
    assert ends == [4, 5, 6, 7, 8, 15, 16, 17, 18, 19]


def brute_force_windows(frame_idx, valid, window):
    out = []
    for t in range(len(frame_idx) - 1):
        lo = t - window + 1
        if lo < 0:
            continue
        span = range(lo, t + 2)
        if all(valid[i] for i in span) and all(frame_idx[i + 1] - frame_idx[i] == 1 for i in range(lo, t + 1)):
            out.append(t)
    return out


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9))
def test_window_ends_match_bruteforce(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(0, 60))
    steps = np.where(r.random(n) < 0.1, r.integers(2, 4, size=n), 1)
    fidx = np.cumsum(steps) if n else np.zeros(0, int)
    valid = r.random(n) > 0.15
    window = int(r.integers(1, 12))
    assert list(dp.window_ends(fidx, valid, window)) == brute_force_windows(fidx, valid, window)


def test_group_videos_validity():
    recs = [dp.FrameRecord("a", 0, 0.1, 0.1), dp.FrameRecord("a", 1, None, None),
            dp.FrameRecord("a", 2, 0.1, 0.1, False), dp.FrameRecord("a", 3, 0.2, 0.2)]
    feats = {("a", 0): np.ones(2), ("a", 1): np.ones(2), ("a", 2): np.ones(2)}
    (vf,) = dp.group_videos(recs, feats)
    np.testing.assert_array_equal(vf.valid, [True, False, False, False])
    (vf,) = dp.group_videos(recs, feats, require_labels=False)
    np.testing.assert_array_equal(vf.valid, [True, True, False, False])
    assert np.isnan(vf.labels[1]).all()


# -- interpolation -----------------------------------------------------------

def test_interpolation_examples():
    out, miss = dp.interpolate_missing([1, 2, 3], [0.2, np.nan, 0.4])
    assert out[1] == pytest.approx(0.3) and list(miss) == [False, True, False]
    out, _ = dp.interpolate_missing([0, 1, 2], [np.nan, np.nan, 0.5])
    np.testing.assert_array_equal(out, [0.5, 0.5, 0.5])
    out, _ = dp.interpolate_missing([0, 1, 2, 3, 4], [0.0, np.nan, np.nan, np.nan, 1.0])
    np.testing.assert_allclose(out, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(DataError):
        dp.interpolate_missing([0, 1], [np.nan, np.nan])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-1, 1)), min_size=1, max_size=30))
def test_interpolation_keeps_known_values(vals):
    if all(v is None for v in vals):
        return
    arr = np.array([np.nan if v is None else v for v in vals])
    out, miss = dp.interpolate_missing(np.arange(len(vals)) * 2, np.stack([arr, -arr], axis=1))
    known = ~np.isnan(arr)
    assert out[known, 0].tobytes() == arr[known].tobytes()
    assert not np.isnan(out).any() and list(miss) == list(~known)


# -- feature files -------------------------------------------------------------

def test_feature_file_roundtrip(tmp_path):
    r = np.random.default_rng(0)
    feats = r.normal(size=(5, 300)).astype(np.float32)
    ids = ["a", "a", "b", "ü", "c"]
    dp.write_features(tmp_path / "f.vaf", ids, [0, 1, 0, 7, 3], feats)
    ids2, fidx, feats2 = dp.read_features(tmp_path / "f.vaf")
    assert ids2 == ids and list(fidx) == [0, 1, 0, 7, 3]
    assert feats2.tobytes() == feats.tobytes()
    raw = (tmp_path / "f.vaf").read_bytes()
    assert raw[:4] == b"VAF1" and int.from_bytes(raw[8:12], "little") == 300
    dp.write_features(tmp_path / "g.vaf", ids2, fidx, feats2)
    assert (tmp_path / "g.vaf").read_bytes() == raw
    (tmp_path / "h.vaf").write_bytes(raw[:-3])
    with pytest.raises(DataError):
        dp.read_features(tmp_path / "h.vaf")


# -- images --------------------------------------------------------------------

def bilinear_oracle(img, oh, ow):
    H, W = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = min(max((i + 0.5) * H / oh - 0.5, 0), H - 1)
            x = min(max((j + 0.5) * W / ow - 0.5, 0), W - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (img[y0, x0] * (1 - dy) * (1 - dx) + img[y0, x1] * (1 - dy) * dx
                         + img[y1, x0] * dy * (1 - dx) + img[y1, x1] * dy * dx)
    return out


def test_resize_matches_oracle():
    yy, xx = np.mgrid[0:112, 0:112]
    grad = (yy + 2 * xx) / (3 * 111.0)
    out = dp.preprocess_image(grad, 96)
    assert out.shape == (96, 96)
    np.testing.assert_allclose(out, bilinear_oracle(grad, 96, 96), atol=1e-6)


def test_preprocess_examples():
    img = np.random.default_rng(0).integers(0, 256, size=(96, 96), dtype=np.uint8)
    np.testing.assert_allclose(dp.preprocess_image(img), img / 255.0, atol=1e-7)
    white = np.full((50, 70, 3), 255, np.uint8)
    out = dp.preprocess_image(white, 96)
    assert out.shape == (96, 96) and np.allclose(out, 1.0)
    rgb = np.zeros((4, 4, 3))
    rgb[..., 1] = 1.0
    np.testing.assert_allclose(dp.preprocess_image(rgb, 4), 0.587, atol=1e-7)
    with pytest.raises(ShapeError):
        dp.preprocess_image(np.zeros((4, 4, 2)), 4)


def test_image_io(tmp_path):
    img = np.linspace(0, 1, 64).reshape(8, 8)
    dp.save_image(tmp_path / "x.png", img)
    back = dp.preprocess_image(dp.load_image(tmp_path / "x.png"), 8)
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-7)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        dp.load_image(tmp_path / "bad.png")


# -- augmentation ----------------------------------------------------------------

def test_augment_identity_and_flip():
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    np.testing.assert_array_equal(dp.augment(img, dp.AugmentParams()), img)
    flip = dp.AugmentParams(flip=True)
    np.testing.assert_array_equal(dp.augment(dp.augment(img, flip), flip), img)
    np.testing.assert_array_equal(dp.augment(img, flip), img[:, ::-1])


def test_augment_brightness_clamps():
    out = dp.augment(np.full((8, 8), 0.95), dp.AugmentParams(brightness=0.1))
    np.testing.assert_array_equal(out, np.ones((8, 8)))


def test_augment_geometry():
    img = np.zeros((33, 33))
    img[16, 26] = 1.0  # 10 px right of centre
    out = dp.augment(img, dp.AugmentParams(rotation_deg=90))
    r, c = np.unravel_index(out.argmax(), out.shape)
    assert abs(r - 16) + abs(c - 16) == 10 and c == 16  # moved onto the vertical axis
    shifted = dp.augment(img, dp.AugmentParams(shift_x=3 / 33))
    assert shifted[16, 29] == pytest.approx(1.0)


def test_augment_seeded_and_in_range():
    img = np.random.default_rng(1).random((24, 24))
    a = dp.augment(img, seed=dp.frame_seed(7, "vid", 3))
    b = dp.augment(img, seed=dp.frame_seed(7, "vid", 3))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    p = dp.sample_augment(np.random.default_rng(0))
    assert 0.9 <= p.scale <= 1.1 and abs(p.rotation_deg) <= 15 and abs(p.shear_deg) <= 10
    with pytest.raises(ShapeError):
        dp.augment(np.zeros((4, 5)))
