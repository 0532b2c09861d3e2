import numpy as np
import pytest
from PIL import Image

from keytrack.imaging import (
    ImageFormatError,
    decode_pgm,
    encode_pgm,
    load_image,
    rgb_to_luma,
    save_pgm,
)


def test_decode_2x2_pgm():
    img = decode_pgm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    assert img.shape == (2, 2)
    assert img.dtype == np.uint8
    assert img.ravel().tolist() == [0, 255, 128, 64]


def test_pgm_header_comments_are_skipped():
    img = decode_pgm(b"P5 # made by hand\n3 1 # w h\n255\n" + bytes([1, 2, 3]))
    assert img.tolist() == [[1, 2, 3]]


@pytest.mark.parametrize(
    "data",
    [
        b"P2\n2 2\n255\n0 1 2 3",
        b"P5\n2 2\n65535\n" + bytes(8),
        b"P5\n2 2\n255\n" + bytes(3),
        b"P5\n2 2\n255\n" + bytes(5),
        b"P5\n2",
        b"P5\nx 2\n255\n" + bytes(4),
    ],
    ids=["ascii", "16bit", "short", "long", "header", "nonint"],
)
def test_malformed_pgm_rejected(data):
    with pytest.raises(ImageFormatError):
        decode_pgm(data)


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(17, 23), dtype=np.uint8)
    save_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(load_image(tmp_path / "a.pgm"), img)
    assert decode_pgm(encode_pgm(img)).tobytes() == img.tobytes()


def test_luma_white_and_weighted():
    rgb = np.array([[[255, 255, 255], [100, 150, 200]]], dtype=np.uint8)
    assert rgb_to_luma(rgb).tolist() == [[255, 141]]


def test_luma_matches_hand_rounding():
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(20, 20, 3), dtype=np.uint8)
    out = rgb_to_luma(rgb)
    flat = rgb.reshape(-1, 3).astype(float)
    expected = [int(np.floor(0.299 * r + 0.587 * g + 0.114 * b + 0.5)) for r, g, b in flat]
    assert out.ravel().tolist() == expected


def test_png_rgb_and_gray(tmp_path):
    rgb = np.array([[[255, 255, 255], [100, 150, 200]], [[0, 0, 0], [10, 20, 30]]], dtype=np.uint8)
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
    assert load_image(tmp_path / "c.png")[0].tolist() == [255, 141]

    gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
    Image.fromarray(gray, "L").save(tmp_path / "g.png")
    assert np.array_equal(load_image(tmp_path / "g.png"), gray)


def test_png_16bit_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "d.png")


def test_missing_and_unknown_files(tmp_path):
    with pytest.raises(OSError):
        load_image(tmp_path / "nope.pgm")
    (tmp_path / "x.bin").write_bytes(b"GIF89a....")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.bin")
