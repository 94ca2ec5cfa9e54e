import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evslt.errors import EmptyStream, MalformedFile, NonMonotonicTime, OutOfBounds
from evslt.events import (
    EventPoint,
    EventStream,
    FrameTensor,
    decode_events,
    encode_events,
    normalize_frames,
    read_events,
    render_rgb,
    resize_frames,
    stack_to_frames,
    subsample_frames,
    synth_scene,
    write_events,
)


@st.composite
def streams(draw, max_events=60):
    w = draw(st.integers(1, 300))
    h = draw(st.integers(1, 300))
    n = draw(st.integers(0, max_events))
    xs = draw(st.lists(st.integers(0, w - 1), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, h - 1), min_size=n, max_size=n))
    ts = sorted(draw(st.lists(st.integers(0, 2**40), min_size=n, max_size=n)))
    ps = draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    return EventStream(w, h, xs, ys, ts, ps)


def test_empty_file_keeps_geometry(tmp_path):
    path = tmp_path / "empty.evst"
    write_events(EventStream(1280, 720, [], [], [], []), path)
    s = read_events(path)
    assert len(s) == 0 and s.geometry == (1280, 720)


def test_empty_stream_is_header_plus_count():
    blob = encode_events(EventStream(1280, 720, [], [], [], []))
    assert blob[:16] == b"EVST" + struct.pack("<HHHI", 1, 1280, 720, 0) + b"\0\0"
    assert blob[16:] == struct.pack("<Q", 0)


def test_single_point_bytes_match_hand_assembly():
    s = EventStream.from_points([(3, 4, 10, 1)], (8, 8))
    expected = (b"EVST" + struct.pack("<HHHI", 1, 8, 8, 0) + b"\0\0" + struct.pack("<Q", 1)
                + struct.pack("<HHqbB", 3, 4, 10, 1, 0))
    assert encode_events(s) == expected
    assert len(expected) == 16 + 8 + 14


def test_out_of_bounds_coordinate(tmp_path):
    blob = bytearray(encode_events(EventStream.from_points([(5, 0, 0, 1)], (1280, 720))))
    struct.pack_into("<H", blob, 24, 1280)  # x of the first record
    with pytest.raises(OutOfBounds):
        decode_events(bytes(blob))


@pytest.mark.parametrize("mutate, exc", [
    (lambda b: b"EVSX" + b[4:], MalformedFile),
    (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], MalformedFile),
    (lambda b: b[:-1], MalformedFile),
    (lambda b: b[:10], MalformedFile),
])
def test_malformed_files(mutate, exc):
    blob = encode_events(EventStream.from_points([(1, 1, 5, -1), (2, 2, 9, 1)], (4, 4)))
    with pytest.raises(exc):
        decode_events(mutate(blob))


def test_non_monotonic_time_rejected():
    with pytest.raises(NonMonotonicTime):
        EventStream.from_points([(0, 0, 10, 1), (0, 0, 5, 1)], (2, 2))


def test_bad_polarity_rejected():
    with pytest.raises(MalformedFile):
        EventStream.from_points([(0, 0, 1, 0)], (2, 2))


def test_random_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    n = 1000
    s = EventStream(640, 480, rng.integers(0, 640, n), rng.integers(0, 480, n),
                    np.sort(rng.integers(0, 10**9, n)), rng.choice([-1, 1], n))
    path = tmp_path / "r.evst"
    write_events(s, path)
    again = read_events(path)
    assert again == s
    assert encode_events(again) == path.read_bytes()


def test_csv_fallback(tmp_path):
    s = EventStream.from_points([(1, 2, 3, 1), (0, 0, 7, -1)], (5, 6))
    path = tmp_path / "e.csv"
    write_events(s, path)
    assert path.read_text().splitlines()[0] == "x,y,t,p"
    assert read_events(path, geometry=(5, 6)) == s
    assert read_events(path).geometry == (2, 3)


@settings(max_examples=60, deadline=None)
@given(streams())
def test_serialization_roundtrip_property(s):
    assert decode_events(encode_events(s)) == s


def test_points_view():
    s = EventStream.from_points([(1, 2, 3, -1)], (4, 4))
    assert s.points == [EventPoint(1, 2, 3, -1)]


# ------------------------------------------------------------------ framing


def test_binning_example():
    s = EventStream.from_points([(0, 0, t, 1) for t in (0, 10, 20, 30)], (1, 1))
    f = stack_to_frames(s, 2).data
    assert f.shape == (2, 2, 1, 1)
    assert f[0, 0, 0, 0] == 2 and f[1, 0, 0, 0] == 2


def test_empty_bin():
    # the span is [t_min, t_max] of the stream itself, so only interior bins can be empty
    s = EventStream.from_points([(0, 0, 0, 1), (0, 0, 10, 1), (0, 0, 20, -1)], (2, 1))
    f = stack_to_frames(s, 4).data
    assert f[1].sum() == 0 and f[0].sum() == 1 and f[2].sum() == 1 and f[3].sum() == 1


def test_empty_stream_refused():
    with pytest.raises(EmptyStream):
        stack_to_frames(EventStream(4, 4, [], [], [], []), 3)


@settings(max_examples=60, deadline=None)
@given(streams(max_events=40).filter(lambda s: len(s) > 0), st.integers(1, 12), st.sampled_from(["time", "count"]))
def test_binning_invariants(s, T, mode):
    f = stack_to_frames(s, T, mode).data
    assert f.sum() == len(s)
    assert (f >= 0).all()
    pos = (s.p == 1).sum()
    assert f[:, 0].sum() == pos and f[:, 1].sum() == len(s) - pos
    # bin index never decreases with time
    rel = s.t - s.t[0]
    span = int(s.t[-1] - s.t[0])
    if mode == "time" and span:
        idx = np.minimum(rel * T // span, T - 1)
        assert np.all(np.diff(idx) >= 0)


def test_resize_identity_is_bitwise():
    data = np.random.default_rng(0).random((3, 2, 5, 7)).astype(np.float32)
    out = resize_frames(FrameTensor(data), 5, 7).data
    assert np.array_equal(out, data) and out is not data


def test_resize_two_by_two_ones():
    f = FrameTensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    assert resize_frames(f, 1, 1).data[0, 0, 0, 0] == 1.0
    assert resize_frames(f, 1, 1, mode="mass").data[0, 0, 0, 0] == 4.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 99))
def test_resize_mass_preserved(h, w, oh, ow, seed):
    data = np.random.default_rng(seed).random((2, 2, h, w))
    out = resize_frames(FrameTensor(data), oh, ow, mode="mass").data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=(2, 3)), data.sum(axis=(2, 3)), rtol=1e-6)


def test_default_training_resolution_path():
    s = EventStream.from_points([(0, 0, 0, 1), (1279, 719, 50, -1), (640, 360, 100, 1)], (1280, 720))
    f = stack_to_frames(s, 2)
    a = resize_frames(f, 256, 256, mode="mass")
    b = resize_frames(a, 224, 224, mode="mass")
    assert b.shape == (2, 2, 224, 224)
    np.testing.assert_allclose(b.data.sum(), 3, rtol=1e-6)


def test_normalize_and_subsample():
    data = np.arange(8 * 2 * 1 * 1, dtype=np.float32).reshape(8, 2, 1, 1)
    n = normalize_frames(FrameTensor(data)).data
    assert n.max() == 1.0 and n.min() == 0.0
    zeros = normalize_frames(FrameTensor(np.zeros((1, 2, 2, 2), dtype=np.float32))).data
    assert not zeros.any()
    sub = subsample_frames(FrameTensor(data), 2).data
    assert np.array_equal(sub, data[[0, 4]])
    with pytest.raises(ValueError):
        subsample_frames(FrameTensor(data), 9)


def test_render_rgb_shape():
    data = np.zeros((2, 2, 3, 3), dtype=np.float32)
    data[0, 0, 1, 1] = 5
    rgb = render_rgb(FrameTensor(data))
    assert rgb.shape == (2, 3, 3, 3) and rgb[0, 0, 1, 1] == 255 and rgb[0, 2].max() == 0


# ---------------------------------------------------------------- synthesis

VOCAB = [f"w{i}" for i in range(8)]


def test_synth_deterministic():
    a = synth_scene(5, VOCAB, (2, 4))
    b = synth_scene(5, VOCAB, (2, 4))
    assert a[0] == b[0] and a[1] == b[1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(0, 3))
def test_synth_length_contract(seed, lo, extra):
    stream, sentence = synth_scene(seed, VOCAB, (lo, lo + extra), geometry=(32, 32), steps_per_token=4)
    assert lo <= len(sentence.body) <= lo + extra
    assert len(stream) > 0
    assert all(4 <= i < 4 + len(VOCAB) for i in sentence.body)


def test_synth_sentences_vary():
    sentences = {synth_scene(s, VOCAB, (2, 4))[1] for s in range(32)}
    assert len(sentences) >= 2


def test_synth_distinct_trajectories_per_token():
    frames = []
    for tok in range(len(VOCAB)):
        # find a seed producing a single-token sentence of each id
        for seed in range(10_000):
            stream, sent = synth_scene(seed, VOCAB, (1, 1))
            if sent.body == (tok + 4,):
                frames.append(stack_to_frames(stream, 4).data)
                break
    assert len(frames) == len(VOCAB)
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            assert not np.array_equal(frames[i], frames[j])


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_scene(0, [], (1, 2))
    with pytest.raises(ValueError):
        synth_scene(0, VOCAB, (3, 2))
