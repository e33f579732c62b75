import numpy as np
import pytest

from svgan.errors import ValidationError
from svgan.report import (decode_ppm, encode_ppm, loss_curve_svg, overlay_rgb, read_log, side_by_side,
                          summary_table, write_report)

HEADER = "step,epoch,adv_d,adv_g,seg_ce,cls_l1,total"


def test_ppm_round_trip():
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    np.testing.assert_array_equal(decode_ppm(encode_ppm(rgb)), rgb)
    with pytest.raises(ValidationError):
        encode_ppm(np.zeros((4, 4)))


def test_overlay_colours_only_foreground():
    image = np.linspace(0, 1, 16).reshape(4, 4)
    labels = np.zeros((4, 4), int)
    labels[0, 0], labels[1, 1] = 1, 2
    rgb = overlay_rgb(image, labels)
    assert rgb[0, 0, 0] > rgb[0, 0, 2]  # red-ish
    assert rgb[1, 1, 2] > rgb[1, 1, 0]  # blue-ish
    grey = rgb[labels == 0]
    assert np.all(grey[:, 0] == grey[:, 1]) and np.all(grey[:, 1] == grey[:, 2])


def test_side_by_side_shape():
    img = side_by_side(np.zeros((6, 5)), np.zeros((6, 5), int), np.ones((6, 5), int))
    assert img.shape == (6, 12, 3)


def test_svg_is_self_contained():
    svg = loss_curve_svg(list(range(10)), [1 / (i + 1) for i in range(10)], "seg_ce")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "href" not in svg and "seg_ce" in svg


def test_single_point_and_flat_curves():
    assert loss_curve_svg([0], [1.0], "x").startswith("<svg")
    assert loss_curve_svg([0, 1, 2], [2.0, 2.0, 2.0], "x").startswith("<svg")


def test_read_log_and_summary(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text(HEADER + "\n0,0,1,2,3,4,9\n1,0,1,2,1,4,7\n")
    cols = read_log(path)
    assert cols["seg_ce"] == [3.0, 1.0]
    table = summary_table(cols)
    assert "| seg_ce | 3.00000 | 1.00000 | 1.00000 | 2.00000 |" in table
    written = write_report(path, tmp_path / "out")
    assert len(written) == 6 and all(p.exists() for p in written)
    assert not list((tmp_path / "out").glob("*.tmp"))


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("step,epoch\n0,0\n", "lacks columns"),
    (HEADER + "\n", "no rows"),
    (HEADER + "\n0,0,1,2,3\n", "line 2"),
    (HEADER + "\n0,0,1,2,3,4,9\n1,0,nan,2,3,4,9\n", "line 3"),
])
def test_read_log_errors(tmp_path, text, match):
    path = tmp_path / "log.csv"
    path.write_text(text)
    with pytest.raises(ValidationError, match=match):
        read_log(path)
