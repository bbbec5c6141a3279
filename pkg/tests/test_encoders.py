import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from merv import featio
from merv.encoders import (
    DEFAULT_PROFILES,
    EncoderProfile,
    default_ensemble,
    encode,
    image_as_video,
    load_video,
    make_mock_encoder,
    reverse_time,
    sample_indices,
    uniform_sample_frames,
)
from merv.errors import AlignmentError, DimensionError, FormatError

SMALL = EncoderProfile("small", 8, 4, 4, 4, 16)


def moving_bar(T=8, size=16, step=1):
    v = np.zeros((T, size, size, 3), dtype=np.float32)
    for f in range(T):
        v[f, 4:12, f * step : f * step + 3] = (0.9, 0.6, 0.3)
    return v


# ---------------------------------------------------------------- profiles


def test_default_profiles_geometry():
    got = {p.name: (p.input_frames, p.out_t, p.out_h, p.out_w, p.dim) for p in default_ensemble()}
    assert got == {
        "languagebind": (16, 16, 16, 16, 1024),
        "dinov2": (16, 16, 16, 16, 1024),
        "vivit": (32, 16, 14, 14, 768),
        "siglip": (16, 16, 14, 14, 768),
    }
    assert DEFAULT_PROFILES["vivit"].temporal_stride == 2


def test_profile_validation():
    with pytest.raises(DimensionError):
        EncoderProfile("x", 8, 0, 4, 4, 4)
    with pytest.raises(DimensionError):
        EncoderProfile("x", 7, 2, 4, 4, 4)
    with pytest.raises(ValueError):
        EncoderProfile("x", 8, 4, 4, 4, 4, latency_ms=-1)
    with pytest.raises(KeyError):
        default_ensemble(["nope"])


def test_profile_round_trip_and_retime():
    p = DEFAULT_PROFILES["vivit"]
    assert EncoderProfile.from_dict(p.to_dict()) == p
    q = p.retimed(8)
    assert (q.input_frames, q.out_t) == (16, 8)
    fixed = EncoderProfile("f", 8, 4, 4, 4, 4, flexible_frames=False)
    assert fixed.retimed(4) == fixed
    with pytest.raises(AlignmentError):
        fixed.retimed(5)


# ---------------------------------------------------------------- videos


def test_uniform_sampling_indices():
    assert list(sample_indices(10, 10)) == list(range(10))
    assert list(sample_indices(10, 1)) == [0]
    want = [int(np.floor(i * 31 / 15 + 0.5)) for i in range(16)]
    assert list(sample_indices(32, 16)) == want
    assert want[:4] == [0, 2, 4, 6] and want[-2:] == [29, 31]


@given(st.integers(1, 64), st.integers(1, 64))
def test_sampling_bounds_and_order(T, n):
    idx = sample_indices(T, n)
    assert len(idx) == n and idx[0] == 0
    assert np.all(np.diff(idx) >= 0) and idx.max() <= T - 1
    if n > 1:
        assert idx[-1] == T - 1


def test_uniform_sample_frames(rng):
    v = rng.random((6, 4, 4, 3)).astype(np.float32)
    assert uniform_sample_frames(v, 6).tobytes() == v.tobytes()
    np.testing.assert_array_equal(uniform_sample_frames(v, 1)[0], v[0])


def test_image_as_video(rng):
    img = rng.random((5, 6, 3)).astype(np.float32)
    assert image_as_video(img, 1).shape == (1, 5, 6, 3)
    v = image_as_video(img, 4)
    assert all(np.array_equal(f, img) for f in v)
    enc = make_mock_encoder(SMALL, 0)
    tiled = np.stack([img] * 8)
    assert encode(enc, image_as_video(img, 8)).tobytes() == encode(enc, tiled).tobytes()
    with pytest.raises(DimensionError):
        image_as_video(img[..., :2], 2)


def test_video_validation():
    with pytest.raises(DimensionError):
        uniform_sample_frames(np.zeros((4, 4, 4)), 2)
    with pytest.raises(ValueError):
        uniform_sample_frames(np.full((2, 4, 4, 3), np.nan), 1)


def test_load_video_from_frames_and_container(tmp_path, rng):
    frames = (rng.random((3, 4, 6, 3)) * 255).astype(np.uint8)
    d = tmp_path / "frames"
    d.mkdir()
    for i, f in enumerate(frames):
        (d / f"{i:03d}.rgb").write_bytes(f.tobytes())
    v = load_video(str(d), frame_size=(4, 6))
    np.testing.assert_allclose(v, frames / 255.0, rtol=1e-6)
    with pytest.raises(FormatError):
        load_video(str(d))  # 4x6 frames are not square
    c = tmp_path / "clip.mrvf"
    featio.write_feature(c, v)
    assert load_video(str(c)).tobytes() == v.tobytes()
    featio.write_feature(tmp_path / "bad.mrvf", np.zeros((2, 3)))
    with pytest.raises(FormatError):
        load_video(str(tmp_path / "bad.mrvf"))


# ---------------------------------------------------------------- mock encoders


def test_encode_geometry_at_default_profiles(rng):
    video = rng.random((32, 32, 32, 3)).astype(np.float32)
    for name, frames, shape in (
        ("vivit", 32, (16, 14, 14, 768)),
        ("languagebind", 16, (16, 16, 16, 1024)),
    ):
        p = DEFAULT_PROFILES[name]
        feat = encode(make_mock_encoder(p, 0), uniform_sample_frames(video, frames))
        assert feat.shape == shape and feat.dtype == np.float32
        assert np.all(np.isfinite(feat))


def test_encode_rejects_frame_mismatch():
    with pytest.raises(AlignmentError):
        encode(make_mock_encoder(SMALL, 0), np.zeros((7, 8, 8, 3)))


def test_mock_encoders_deterministic(rng):
    v = rng.random((8, 16, 16, 3)).astype(np.float32)
    for kind in ("spatial", "temporal", "language", "generic"):
        a = encode(make_mock_encoder(SMALL, 3, kind), v)
        b = encode(make_mock_encoder(SMALL, 3, kind), v)
        assert a.tobytes() == b.tobytes()
    assert not np.array_equal(encode(make_mock_encoder(SMALL, 3), v), encode(make_mock_encoder(SMALL, 4), v))


def test_spatial_kind_is_order_blind():
    v = moving_bar()
    enc = make_mock_encoder(SMALL, 0, "spatial")
    assert encode(enc, v).tobytes() == encode(enc, reverse_time(v)).tobytes()


def test_temporal_kind_sees_direction():
    v = moving_bar()
    enc = make_mock_encoder(SMALL, 0, "temporal")
    a, b = encode(enc, v), encode(enc, reverse_time(v))
    assert np.mean(np.abs(a - b) > 1e-3) >= 0.01


def test_constant_video_gives_identical_frames():
    enc = make_mock_encoder(SMALL, 0, "generic")
    feat = encode(enc, np.full((8, 16, 16, 3), 0.4, dtype=np.float32))
    assert all(np.array_equal(f, feat[0]) for f in feat)


@given(st.integers(0, 99), st.sampled_from(["spatial", "temporal", "language", "generic"]))
def test_geometry_independent_of_content(seed, kind):
    v = np.random.default_rng(seed).random((8, 12, 12, 3)).astype(np.float32)
    assert encode(make_mock_encoder(SMALL, 0, kind), v).shape == SMALL.grid


# ---------------------------------------------------------------- feature files


@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=5, max_side=5),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_featio_round_trip_bit_exact(arr):
    back = featio.loads(featio.dumps(arr))
    assert back.shape == arr.shape and back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_featio_layout():
    buf = featio.dumps(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[:8] == b"MERVFTR1"
    assert buf[8:10] == bytes([1, 2])
    assert buf[10:18] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert buf[18:] == np.array([1, 2, 3], dtype="<f4").tobytes()


def test_featio_errors(tmp_path):
    good = featio.dumps(np.ones((2, 3), dtype=np.float32))
    for bad in (good[:-1], good[:5], good[:12], b"NOTMAGIC" + good[8:], good[:8] + b"\x02" + good[9:], good + b"\0"):
        with pytest.raises(FormatError):
            featio.loads(bad)
    with pytest.raises(FormatError):
        featio.dumps(np.ones(3, dtype=np.int32))
    path = tmp_path / "f.mrvf"
    featio.write_feature(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    assert os.path.getsize(path) == 8 + 2 + 8 + 24
    np.testing.assert_array_equal(featio.read_feature(path), np.arange(6).reshape(2, 3))


def test_featio_float64_is_stored_as_float32():
    x = np.array([1.0 / 3.0])
    assert featio.loads(featio.dumps(x))[0] == np.float32(1.0 / 3.0)
