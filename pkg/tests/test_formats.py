import numpy as np
import pytest

from maskclip import formats
from maskclip.rma import init_rma_params
from maskclip.vit import ViTConfig, init_weights

SMALL = ViTConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2, mlp_ratio=2, out_dim=4)


def test_container_round_trip_is_bit_exact(tmp_path):
    w = init_weights(SMALL, 0)
    formats.save_weights(tmp_path / "w.mcw", w)
    back = formats.load_weights(tmp_path / "w.mcw")
    assert back.config == SMALL
    assert back.content_hash == w.content_hash


def test_container_extents_match_data_length():
    data = formats.encode_container({"a": 1}, {"x": np.zeros((2, 3))})
    with pytest.raises(formats.FormatError):
        formats.decode_container(data[:-4])
    with pytest.raises(formats.FormatError):
        formats.decode_container(data + b"\0\0\0\0")
    with pytest.raises(formats.FormatError):
        formats.decode_container(b"NOPE\n")


def test_rma_round_trip(tmp_path):
    w = init_weights(SMALL, 0)
    p = init_rma_params(w, layers=(1, 2))
    formats.save_rma(tmp_path / "r.mcw", p, SMALL)
    back = formats.load_rma(tmp_path / "r.mcw")
    assert back.layers == (1, 2)
    for k, v in p.tensors.items():
        assert np.array_equal(back.tensors[k], v)


def test_mask_file_round_trip(tmp_path):
    m = np.random.default_rng(0).random((3, 5, 4))
    formats.write_masks(tmp_path / "m.mcm", m, 0.25)
    back, theta = formats.read_masks(tmp_path / "m.mcm")
    assert theta == 0.25 and np.array_equal(back, m)


def test_mask_file_rejects_bad_values(tmp_path):
    (tmp_path / "bad.mcm").write_text("MCM1 1 1 2 0.5\n0.2 1.5\n")
    with pytest.raises(formats.FormatError):
        formats.read_masks(tmp_path / "bad.mcm")
    (tmp_path / "short.mcm").write_text("MCM1 1 1 2 0.5\n0.2\n")
    with pytest.raises(formats.FormatError):
        formats.read_masks(tmp_path / "short.mcm")


def test_pgm_mask_directory(tmp_path):
    a = np.zeros((4, 4), np.uint8)
    a[:2] = 255
    (tmp_path / "masks").mkdir()
    (tmp_path / "masks" / "0.pgm").write_bytes(formats.encode_pnm(a))
    (tmp_path / "masks" / "1.pgm").write_bytes(formats.encode_pnm(255 - a))
    m, theta = formats.read_masks(tmp_path / "masks")
    assert m.shape == (2, 4, 4) and theta == 0.5
    assert np.array_equal(m[0], a / 255.0)


def test_image_round_trip_and_comments(tmp_path):
    img = np.round(np.random.default_rng(1).random((3, 6, 5)) * 255) / 255
    formats.write_image(tmp_path / "i.ppm", img)
    np.testing.assert_array_equal(formats.read_image(tmp_path / "i.ppm"), img)
    raw = b"P5\n# comment\n2 1\n255\n" + bytes([0, 255])
    (tmp_path / "g.pgm").write_bytes(raw)
    np.testing.assert_array_equal(formats.read_image(tmp_path / "g.pgm")[:, 0], [[0, 1]] * 3)


def test_sixteen_bit_pgm(tmp_path):
    ids = np.array([[0, 300], [65535, 7]])
    (tmp_path / "p.pgm").write_bytes(formats.encode_pnm(ids, 65535))
    assert np.array_equal(formats.read_pnm(tmp_path / "p.pgm"), ids)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    formats.atomic_write(tmp_path / "sub" / "f.bin", b"abc")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.bin"]
