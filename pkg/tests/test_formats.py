import numpy as np
import pytest

from fisheye_bev.errors import FormatError
from fisheye_bev.formats import load_field, load_pgm, save_field, save_pgm, save_visualization
from fisheye_bev.parallel import THREADS_ENV, ordered_map, resolve_threads


def test_field_round_trip(tmp_path, rng):
    a = rng.normal(size=(5, 7, 3)).astype(np.float32)
    save_field(a, tmp_path / "f.fpfd")
    np.testing.assert_array_equal(load_field(tmp_path / "f.fpfd"), a)
    data = (tmp_path / "f.fpfd").read_bytes()
    assert data[:4] == b"FPFD" and int.from_bytes(data[8:12], "little") == 7
    save_field(np.full((2, 2), np.inf), tmp_path / "g.fpfd")
    assert np.isinf(load_field(tmp_path / "g.fpfd")).all()


@pytest.mark.parametrize("cut, offset", [(2, 2), (-4, None)])
def test_field_truncation(tmp_path, cut, offset):
    save_field(np.zeros((2, 2, 2)), tmp_path / "f.fpfd")
    data = (tmp_path / "f.fpfd").read_bytes()
    (tmp_path / "t").write_bytes(data[:cut])
    with pytest.raises(FormatError) as err:
        load_field(tmp_path / "t")
    if offset is not None:
        assert err.value.offset == offset


def test_pgm(tmp_path):
    ids = np.array([[0, 1, 2], [2, 1, 0]])
    save_pgm(ids, tmp_path / "l.pgm")
    assert (tmp_path / "l.pgm").read_bytes()[:2] == b"P5"
    np.testing.assert_array_equal(load_pgm(tmp_path / "l.pgm"), ids)
    (tmp_path / "bad.pgm").write_bytes(b"not an image")
    with pytest.raises(FormatError):
        load_pgm(tmp_path / "bad.pgm")
    with pytest.raises(ValueError):
        save_pgm(np.array([[300]]), tmp_path / "x.pgm")


def test_visualization(tmp_path):
    a = np.stack([np.linspace(-1, 1, 12).reshape(3, 4), np.zeros((3, 4))], axis=-1)
    scales = save_visualization(a, tmp_path / "v.ppm")
    assert scales == [(-1.0, 1.0), (0.0, 0.0)]
    assert (tmp_path / "v.ppm").read_bytes()[:2] == b"P6"
    side = (tmp_path / "v.ppm.scale.txt").read_text().splitlines()
    assert side == ["channel,min,max", "0,-1.0,1.0", "1,0.0,0.0"]
    save_visualization(a[..., 0], tmp_path / "g.pgm")
    img = load_pgm(tmp_path / "g.pgm")
    assert img.min() == 0 and img.max() == 255


def test_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads() == 3 and resolve_threads(2) == 2
    with pytest.raises(ValueError):
        resolve_threads(0)
    assert ordered_map(lambda x: x * x, range(20), 4) == [x * x for x in range(20)]
