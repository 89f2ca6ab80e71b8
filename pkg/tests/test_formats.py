"""Byte-level pins for the on-disk formats; any drift here is a wire-format break."""

import struct
from pathlib import Path

import numpy as np
import pytest

from trajflow.core import DatasetManifest, decode_grid, decode_masks, encode_grid, encode_masks, encode_ppm
from trajflow.imgenc import read_tokens, write_tokens

GOLDEN = Path(__file__).parent / "golden"


def test_grid_layout():
    grid = np.array([1.0, 1.0, 1.5, -2.0], dtype=np.float32).reshape(2, 1, 1, 2)
    hand = b"TGRD" + struct.pack("<IIII", 1, 2, 1, 1) + struct.pack("<4f", 1.0, 1.0, 1.5, -2.0)
    assert encode_grid(grid) == hand
    assert encode_grid(grid) == (GOLDEN / "grid_t2_1x1.bin").read_bytes()
    np.testing.assert_array_equal(decode_grid(hand), grid)


def test_grid_payload_order_is_t_h_w_xy():
    grid = np.arange(2 * 2 * 3 * 2, dtype=np.float32).reshape(2, 2, 3, 2)
    payload = encode_grid(grid)[20:]
    assert struct.unpack("<24f", payload) == tuple(float(v) for v in range(24))


def test_mask_layout():
    masks = np.array([[0, 1], [2, 65535]])
    hand = b"MSKG" + struct.pack("<III", 1, 2, 2) + struct.pack("<4H", 0, 1, 2, 65535)
    assert encode_masks(masks) == hand
    assert encode_masks(masks) == (GOLDEN / "masks_2x2.bin").read_bytes()
    np.testing.assert_array_equal(decode_masks(hand), masks)


def test_token_layout(tmp_path):
    tokens = np.array([[0.0, -1.0, 10.0]], dtype=np.float32)
    write_tokens(tokens, tmp_path / "t.bin")
    hand = b"ITOK" + struct.pack("<III", 1, 1, 3) + struct.pack("<3f", 0.0, -1.0, 10.0)
    assert (tmp_path / "t.bin").read_bytes() == hand
    assert hand == (GOLDEN / "tokens_1x3.bin").read_bytes()
    np.testing.assert_array_equal(read_tokens(GOLDEN / "tokens_1x3.bin"), tokens)


def test_ppm_layout():
    img = np.array([[[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]]])
    assert encode_ppm(img) == b"P6\n2 1\n255\n" + bytes([255, 0, 128, 0, 255, 0])


def test_manifest_schema():
    m = DatasetManifest(scenes=["scene_00000", "scene_00001"], T=24, Gh=32, Gw=32, s=2, H=64, W=64, K=8,
                        master_seed=7)
    golden = (GOLDEN / "manifest.json").read_text()
    assert m.to_json() == golden
    assert DatasetManifest.from_json(golden) == m


@pytest.mark.parametrize("name", ["grid_t2_1x1.bin", "masks_2x2.bin", "tokens_1x3.bin"])
def test_golden_files_little_endian_version_one(name):
    buf = (GOLDEN / name).read_bytes()
    assert struct.unpack_from("<I", buf, 4) == (1,)
