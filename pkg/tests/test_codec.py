import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchdit import codec


def clip_shapes():
    return st.tuples(
        st.sampled_from([1, 5, 9, 17]),
        st.sampled_from([8, 16, 32]),
        st.sampled_from([8, 16, 32]),
    )


def test_latent_frame_counts():
    assert codec.latent_frames(17) == 5
    assert codec.latent_frames(49) == 13
    assert codec.latent_frames(1) == 1
    with pytest.raises(ValueError):
        codec.latent_frames(16)


def test_latent_group_indexing():
    # frame 0 is its own causal group; group g>=1 covers frames [4g-3 .. 4g]
    assert codec.latent_group(0) == 0
    assert [codec.latent_group(t) for t in [1, 2, 3, 4]] == [1, 1, 1, 1]
    assert codec.latent_group(5) == 2
    assert codec.latent_group(16) == 4
    assert codec.group_pixel_frames(0, 17) == [0]
    assert codec.group_pixel_frames(2, 17) == [5, 6, 7, 8]


def test_encode_zero_clip():
    lat = codec.encode_video(np.zeros((17, 32, 32, 3)))
    assert lat.shape == (5, 4, 4, 768)
    assert not lat.any()


def test_decode_all_ones_latent():
    clip = codec.decode_video(np.ones((5, 4, 4, 768)))
    assert clip.shape == (17, 32, 32, 3)
    assert (clip == 1.0).all()


def test_encode_rejects_bad_shapes():
    with pytest.raises(ValueError):
        codec.encode_video(np.zeros((16, 32, 32, 3)))
    with pytest.raises(ValueError):
        codec.encode_video(np.zeros((17, 30, 32, 3)))
    with pytest.raises(ValueError):
        codec.decode_video(np.zeros((5, 4, 4, 512)))


def test_frame0_causal_replication():
    clip = np.random.default_rng(0).random((5, 8, 8, 3))
    lat = codec.encode_video(clip)
    # group 0 packs frame 0 four times: all four temporal slots identical
    cell = lat[0].reshape(1, 1, 4, 8, 8, 3)
    for s in range(1, 4):
        assert (cell[:, :, s] == cell[:, :, 0]).all()


@settings(max_examples=40, deadline=None)
@given(clip_shapes(), st.integers(0, 2**32 - 1))
def test_roundtrip_bijective(shape, seed):
    t, h, w = shape
    clip = np.random.default_rng(seed).random((t, h, w, 3))
    back = codec.decode_video(codec.encode_video(clip))
    assert back.dtype == clip.dtype
    assert (back == clip).all()  # exact, never approximate


def test_roundtrip_100_random_instances():
    rng = np.random.default_rng(1234)
    for _ in range(100):
        clip = rng.random((17, 32, 32, 3))
        assert (codec.decode_video(codec.encode_video(clip)) == clip).all()


def brute_force_mask(pixel_masks):
    t, h, w = pixel_masks.shape
    tp, hp, wp = codec.latent_frames(t), h // 8, w // 8
    out = np.zeros((tp, hp, wp), dtype=np.uint8)
    for g in range(tp):
        for f in codec.group_pixel_frames(g, t):
            for yy in range(h):
                for xx in range(w):
                    if pixel_masks[f, yy, xx]:
                        out[g, yy // 8, xx // 8] = 1
    return out


def test_mask_single_pixel_index_arithmetic():
    m = np.zeros((17, 32, 32), dtype=np.uint8)
    m[5, 17, 9] = 1  # frame 5, y=17, x=9
    lat = codec.encode_mask(m)
    want = np.zeros((5, 4, 4), dtype=np.uint8)
    want[2, 2, 1] = 1  # group ceil(5/4)=2, y'=17//8=2, x'=9//8=1
    assert (lat == want).all()


def test_mask_zero_and_full_frame():
    assert not codec.encode_mask(np.zeros((17, 32, 32))).any()
    m = np.zeros((17, 32, 32), dtype=np.uint8)
    m[6] = 1
    lat = codec.encode_mask(m)
    assert (lat[2] == 1).all()
    lat[2] = 0
    assert not lat.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 8, 8), (5, 16, 16), (9, 16, 16)]))
def test_mask_or_equivalence_brute_force(seed, shape):
    m = (np.random.default_rng(seed).random(shape) < 0.05).astype(np.uint8)
    assert (codec.encode_mask(m) == brute_force_mask(m)).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_monotonic(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((5, 16, 16)) < 0.02).astype(np.uint8)
    before = codec.encode_mask(m)
    t = int(rng.integers(0, 5))
    y = int(rng.integers(0, 16))
    x = int(rng.integers(0, 16))
    m2 = m.copy()
    m2[t, y, x] = 1
    after = codec.encode_mask(m2)
    assert (after >= before).all()
