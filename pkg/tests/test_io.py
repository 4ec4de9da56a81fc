import numpy as np
import pytest

import adjk
from adjk import FieldStore, io

SRC = """field x: f32[3, 2] needs_grad; field n: i32[4]; field loss: f32[] needs_grad;"""


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_snapshot_file_round_trip(tmp_path, precision):
    p = adjk.compile_source(SRC)
    s = FieldStore(p, precision)
    s["x"] = np.arange(6).reshape(3, 2) * 0.1
    s["n"] = [1, -2, 3, 2 ** 31 - 1]
    s["loss"] = 2.5
    s.grad("x")[...] = 7.0
    path = tmp_path / "snap.bin"
    io.save_snapshot(s, path, grads=True)
    other = FieldStore(p, precision)
    io.restore_snapshot(other, path)
    for k in ("x", "n", "loss"):
        assert other[k].tobytes() == s[k].tobytes()
    np.testing.assert_array_equal(other.grad("x"), 7.0)
    meta = (tmp_path / "snap.bin.json").read_text()
    assert '"dtype": "i32"' in meta


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    io.write_pgm(tmp_path / "a.pgm", img)
    back = io.read_pgm(tmp_path / "a.pgm")
    assert back.shape == (3, 4)
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-12)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_pgm_constant_image_is_black(tmp_path):
    io.write_pgm(tmp_path / "c.pgm", np.full((2, 2), 3.0))
    assert not io.read_pgm(tmp_path / "c.pgm").any()


def test_ascii_pgm(tmp_path):
    (tmp_path / "p2.pgm").write_text("P2\n# comment\n2 1\n4\n0 4\n")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "p2.pgm"), [[0.0, 1.0]])


def test_pgm_rejects_3d(tmp_path):
    with pytest.raises(ValueError):
        io.write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2)))


def test_loss_csv(tmp_path):
    io.write_loss_csv(tmp_path / "loss.csv", [0.1, 1 / 3], {"grad": [1.0, -1.0]})
    text = (tmp_path / "loss.csv").read_text()
    assert text.splitlines()[0] == "iteration,loss,grad"
    assert io.read_loss_csv(tmp_path / "loss.csv") == [0.1, 1 / 3]


def test_frame_name():
    assert io.frame_name(7) == "frame_0007.pgm"


def test_rasterize_points_orientation():
    img = io.rasterize_points([[0.0, 1.0]], size=8, radius=0)
    assert img[0, 0] == 1 and img.sum() == 1
