import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fisheye_bev.camera import FisheyeIntrinsics, project_points
from fisheye_bev.errors import FormatError
from fisheye_bev.lut import build_lut, load_lut, lut_bytes, parse_lut, save_lut

from conftest import random_intrinsics


def test_center_pixel_is_optical_axis():
    intr = FisheyeIntrinsics(30.0, (50.5, 40.5), distortion=(-0.5, 0.02, 0, 0), image_size=(101, 81))
    lut = build_lut(intr)
    np.testing.assert_allclose(lut.directions[40, 50], [0, 0, 1], atol=1e-6)


def test_dims_follow_ceil(desk):
    lut = build_lut(desk, stride=5)
    assert (lut.width, lut.height) == (26, 22)


def test_entries_round_trip(desk):
    lut = build_lut(desk, stride=1)
    d = lut.directions[lut.valid].astype(np.float64)
    uv, ok = project_points(d, desk)
    assert ok.all()
    assert np.max(np.abs(uv - lut.pixel_centers()[lut.valid])) < 1e-5


def test_invalid_entries_are_zero(desk):
    lut = build_lut(desk)
    assert 0 < lut.num_valid < lut.width * lut.height
    assert not np.any(lut.directions[~lut.valid])
    norms = np.linalg.norm(lut.directions[lut.valid].astype(np.float64), axis=1)
    assert np.max(np.abs(norms - 1)) < 1e-7


def test_coarse_entries_match_fine(desk):
    # with stride s the coarse centre ((j+0.5)s) coincides with fine pixel s*j + (s-1)/2,
    # which is a fine pixel centre only for odd s
    fine = build_lut(desk, 1)
    coarse = build_lut(desk, 3)
    sub = fine.directions[1::3, 1::3]
    h, w = sub.shape[:2]
    np.testing.assert_array_equal(coarse.directions[:h, :w], sub)
    np.testing.assert_array_equal(coarse.valid[:h, :w], fine.valid[1::3, 1::3])


def test_save_load_bit_exact(tmp_path):
    intr = FisheyeIntrinsics(1.5, (2, 2), image_size=(4, 4), theta_max=1.2)
    lut = build_lut(intr)
    assert 0 < lut.num_valid < 16
    save_lut(lut, tmp_path / "a.flut")
    back = load_lut(tmp_path / "a.flut")
    assert back == lut
    assert lut_bytes(back) == (tmp_path / "a.flut").read_bytes()


def test_file_layout(desk):
    lut = build_lut(desk, stride=4)
    data = lut_bytes(lut)
    assert data[:4] == b"FLUT"
    assert int.from_bytes(data[4:8], "little") == 1
    n = lut.width * lut.height
    assert len(data) == 20 + 12 * n + (n + 7) // 8
    bits = np.frombuffer(data[20 + 12 * n:], dtype=np.uint8)
    first = lut.valid.ravel()[:8]
    assert bits[0] == sum(int(b) << k for k, b in enumerate(first))


@pytest.mark.parametrize("mutate, offset", [
    (lambda d: b"XLUT" + d[4:], 0),
    (lambda d: d[:4] + (2).to_bytes(4, "little") + d[8:], 4),
    (lambda d: d[:10], 10),
    (lambda d: d[:-1], None),
    (lambda d: d + b"\0", None),
])
def test_corrupt_files_rejected(desk, mutate, offset):
    data = lut_bytes(build_lut(desk, stride=8))
    with pytest.raises(FormatError) as err:
        parse_lut(mutate(data))
    assert "offset" in str(err.value)
    if offset is not None:
        assert err.value.offset == offset


def test_deterministic_across_threads(desk):
    ref = lut_bytes(build_lut(desk, 2, threads=1))
    for threads in (2, 8):
        assert lut_bytes(build_lut(desk, 2, threads=threads)) == ref


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), stride=st.integers(1, 6))
def test_invariants_on_random_calibrations(seed, stride):
    intr = random_intrinsics(np.random.default_rng(seed), width=48, height=40)
    lut = build_lut(intr, stride)
    d = lut.directions.astype(np.float64)
    norms = np.linalg.norm(d[lut.valid], axis=1)
    assert np.all(np.abs(norms - 1) <= 1e-7)
    assert not np.any(d[~lut.valid])
