import numpy as np
import pytest

from flowseg import ppm


def test_pgm_round_trip_and_scale_comment(tmp_path):
    values = np.linspace(-2.0, 3.0, 12).reshape(3, 4)
    path = str(tmp_path / "map.pgm")
    ppm.write_pgm(path, values, comment="test")
    img = ppm.read_pnm(path)
    assert img.shape == (3, 4)
    assert img.min() == 0 and img.max() == 255
    header = open(path, "rb").read(80).decode("ascii", "ignore")
    assert "min=-2" in header and "max=3" in header


def test_pgm_constant_field(tmp_path):
    path = str(tmp_path / "flat.pgm")
    ppm.write_pgm(path, np.full((2, 2), 5.0))
    assert np.all(ppm.read_pnm(path) == 0)


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    path = str(tmp_path / "img.ppm")
    ppm.write_ppm(path, rgb)
    assert np.array_equal(ppm.read_pnm(path), rgb)


def test_write_pgm_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        ppm.write_pgm(str(tmp_path / "x.pgm"), np.zeros(3))


def test_chart_renders_deterministically(tmp_path):
    series = {
        "a": (np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.2, 0.1])),
        "b": (np.array([1.0, 2.0, 3.0]), np.array([0.4, 0.35, 0.3])),
    }
    img1 = ppm.render_line_chart(series)
    img2 = ppm.render_line_chart(series)
    assert np.array_equal(img1, img2)
    assert img1.shape == (400, 640, 3)
    # Both palette colours appear on the canvas.
    flat = img1.reshape(-1, 3)
    for colour in ppm.PALETTE[:2]:
        assert (flat == np.array(colour)).all(axis=1).any()


def test_chart_rejects_empty():
    with pytest.raises(ValueError):
        ppm.render_line_chart({})
