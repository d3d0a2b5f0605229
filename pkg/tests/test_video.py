"""Frame sampling, the frozen image encoder, pooling, and the feature cache."""

import numpy as np
import pytest

from vidprompt import video
from vidprompt.autograd import Tensor


def _sample(t=40, f=6, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return video.VideoSample(id=f"vid-{seed}", frames=rng.standard_normal((t, f)),
                             label=0, **kw)


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------

def test_sample_frames_respects_clip_and_gap(rng):
    sample = _sample(t=100)
    indices, gap = video.sample_frames(sample, 16, [1, 2, 3], rng)
    assert len(indices) == 16
    assert gap in (1, 2, 3)
    assert all(b - a == gap for a, b in zip(indices, indices[1:]))
    assert 0 <= indices[0] and indices[-1] < 100


def test_sample_frames_filters_infeasible_gaps(rng):
    sample = _sample(t=20)
    for _ in range(50):
        _, gap = video.sample_frames(sample, 16, [1, 2, 10], rng)
        assert gap == 1  # only (16-1)*1 <= 19 fits


def test_sample_frames_pads_short_videos(rng):
    sample = _sample(t=5)
    indices, gap = video.sample_frames(sample, 16, [2, 3], rng)
    assert gap == 1
    assert indices == [0, 1, 2, 3, 4] + [4] * 11


def test_sample_frames_is_seed_deterministic():
    sample = _sample(t=64)
    a = video.sample_frames(sample, 8, [1, 2, 4], np.random.default_rng(7))
    b = video.sample_frames(sample, 8, [1, 2, 4], np.random.default_rng(7))
    assert a == b


def test_sample_frames_input_validation(rng):
    sample = _sample()
    with pytest.raises(ValueError):
        video.sample_frames(sample, 0, [1], rng)
    with pytest.raises(ValueError):
        video.sample_frames(sample, 4, [], rng)


def test_video_sample_rejects_bad_shapes():
    with pytest.raises(ValueError):
        video.VideoSample(id="x", frames=np.zeros(5), label=0)
    with pytest.raises(ValueError):
        video.VideoSample(id="x", frames=np.zeros((0, 4)), label=0)


# ---------------------------------------------------------------------------
# frozen image encoder
# ---------------------------------------------------------------------------

def test_image_encoder_is_deterministic_and_frozen():
    enc_a = video.FrozenImageEncoder(6, 8, np.random.default_rng(3))
    enc_b = video.FrozenImageEncoder(6, 8, np.random.default_rng(3))
    frames = np.random.default_rng(0).standard_normal((4, 6))
    np.testing.assert_array_equal(enc_a.encode(frames), enc_b.encode(frames))
    assert all(not p.trainable for p in enc_a.parameters())


def test_image_encoder_output_is_layer_normed(rng):
    enc = video.FrozenImageEncoder(6, 32, rng)
    out = enc.encode(rng.standard_normal((10, 6)))
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_encode_frames_selects_requested_indices(rng):
    enc = video.FrozenImageEncoder(6, 8, rng)
    sample = _sample(t=30)
    ff = video.encode_frames(sample, [0, 5, 10], enc, gap=5)
    assert ff.frame_indices == [0, 5, 10] and ff.gap == 5
    np.testing.assert_array_equal(ff.features,
                                  enc.encode(sample.frames[[0, 5, 10]]))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_mean_pool_snippet_oracle(rng):
    x = rng.standard_normal((7, 5))
    np.testing.assert_allclose(video.mean_pool_snippet(Tensor(x)).data,
                               x.mean(axis=0, keepdims=True), atol=1e-7)


def test_mean_pool_snippet_rejects_empty():
    with pytest.raises(ValueError):
        video.mean_pool_snippet(Tensor(np.zeros((0, 4))))


def test_mean_pool_proposal_full_cover_equals_snippet(rng):
    x = Tensor(rng.standard_normal((9, 4)))
    times = [float(i) for i in range(9)]
    full = video.mean_pool_proposal(x, video.Proposal(0.0, 9.0), times)
    np.testing.assert_array_equal(full.data, video.mean_pool_snippet(x).data)


def test_mean_pool_proposal_half_open_interval(rng):
    x = Tensor(rng.standard_normal((6, 3)))
    times = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    # [1, 4) covers frame times 1, 2, 3 but not 4
    got = video.mean_pool_proposal(x, video.Proposal(1.0, 4.0), times).data
    np.testing.assert_allclose(got, x.data[1:4].mean(axis=0, keepdims=True),
                               atol=1e-7)


def test_mean_pool_proposal_empty_interval(rng):
    x = Tensor(rng.standard_normal((3, 3)))
    with pytest.raises(video.EmptyProposalError):
        video.mean_pool_proposal(x, video.Proposal(10.0, 11.0), [0.0, 1.0, 2.0])


def test_proposal_rejects_degenerate_interval():
    with pytest.raises(ValueError):
        video.Proposal(3.0, 3.0)


# ---------------------------------------------------------------------------
# multi-crop prediction
# ---------------------------------------------------------------------------

def test_five_crop_averages_predictions(rng):
    sample = _sample(t=50)
    calls = []

    def predict_once(indices, gap):
        calls.append((tuple(indices), gap))
        return np.array([float(indices[0]), float(gap)])

    out = video.five_crop_predict(sample, predict_once, rng, clip_length=4,
                                  gap_set=[1, 2], crops=5)
    assert len(calls) == 5
    want = np.mean([[i[0], g] for i, g in calls], axis=0)
    np.testing.assert_allclose(out, want)


def test_single_crop_is_just_one_prediction(rng):
    sample = _sample(t=50)
    out = video.five_crop_predict(sample, lambda i, g: np.ones(3), rng,
                                  clip_length=4, gap_set=[1], crops=1)
    np.testing.assert_array_equal(out, np.ones(3))


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

def test_feature_cache_round_trip(tmp_path, rng):
    features = {
        "train-cat-000-alpha-000": rng.standard_normal((12, 8)).astype(np.float32),
        "val-x": rng.standard_normal((3, 8)).astype(np.float32),
    }
    path = tmp_path / "features.bin"
    video.write_feature_cache(path, features)
    loaded = video.read_feature_cache(path)
    assert set(loaded) == set(features)
    for vid in features:
        np.testing.assert_array_equal(loaded[vid], features[vid])


def test_feature_cache_is_float32_little_endian(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    path = tmp_path / "features.bin"
    video.write_feature_cache(path, {"v": arr})
    raw = path.read_bytes()
    # u16 id length, id, two u32 dims, then 6 f32 values
    assert len(raw) == 2 + 1 + 8 + 6 * 4
    loaded = video.read_feature_cache(path)
    assert loaded["v"].dtype == np.float32
    np.testing.assert_array_equal(loaded["v"], arr.astype(np.float32))
