import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifes.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from ifes.errors import ConfigError, DataError, IntegrityError, ParseError, RegistrationError
from ifes.imageio import (
    ImagePair,
    decode_pgm,
    encode_pgm,
    from_tensor,
    load_gray_image,
    load_pairs,
    sample_patches,
    save_gray_image,
    to_tensor,
)
from ifes.metrics import BYTE, UNIT, GrayImage
from ifes.network import NetConfig, build_network


def pgm(w, h, payload, header=None):
    return (header or f"P5\n{w} {h}\n255\n").encode() + bytes(payload)


class TestDecode:
    def test_minimal(self):
        img = decode_pgm(pgm(3, 2, [0, 1, 2, 3, 4, 255]))
        assert img.range == BYTE
        np.testing.assert_array_equal(img.pixels, [[0, 1, 2], [3, 4, 255]])

    def test_comments_and_odd_whitespace(self):
        data = b"P5 # made by hand\n# another\n 2\t1\r\n255 " + bytes([7, 9])
        np.testing.assert_array_equal(decode_pgm(data).pixels, [[7, 9]])

    def test_ascii_variant_rejected(self):
        with pytest.raises(ParseError, match="P2") as err:
            decode_pgm(b"P2\n1 1\n255\n0\n")
        assert err.value.offset == 0

    def test_truncated_payload_offset(self):
        data = pgm(2, 2, [1, 2, 3])
        with pytest.raises(ParseError) as err:
            decode_pgm(data)
        assert err.value.offset == len(data)

    def test_truncated_header(self):
        with pytest.raises(ParseError, match="truncated"):
            decode_pgm(b"P5\n4 ")

    def test_zero_size(self):
        with pytest.raises(ParseError, match="zero-size"):
            decode_pgm(b"P5\n0 3\n255\n")

    def test_maxval(self):
        with pytest.raises(ParseError, match="maxval"):
            decode_pgm(b"P5\n1 1\n65535\n\x00\x00")

    def test_bad_token(self):
        with pytest.raises(ParseError, match="width"):
            decode_pgm(b"P5\nab 1\n255\n\x00")

    def test_path_in_message(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ParseError, match="x.pgm"):
            load_gray_image(p)


class TestEncode:
    def test_header_and_rounding(self):
        data = encode_pgm(GrayImage(np.array([[127.5, 0.4]]), BYTE))
        assert data.startswith(b"P5\n2 1\n255\n")
        assert data[-2:] == bytes([128, 0])

    def test_unit_half_rounds_up(self):
        # 0.5 on the unit range is 127.5 bytes, which rounds to 128
        assert encode_pgm(GrayImage(np.array([[0.5]]), UNIT))[-1] == 128

    def test_clamps(self):
        assert encode_pgm(GrayImage(np.array([[-4.0, 300.0]]), BYTE))[-2:] == bytes([0, 255])

    def test_rejects_empty_and_nan(self):
        with pytest.raises(DataError):
            encode_pgm(GrayImage(np.zeros((0, 3)), BYTE))
        with pytest.raises(DataError):
            encode_pgm(GrayImage(np.array([[np.nan]]), BYTE))

    @settings(max_examples=50, deadline=None)
    @given(h=st.integers(1, 20), w=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
    def test_bitwise_round_trip(self, h, w, seed):
        raw = np.random.default_rng(seed).integers(0, 256, size=(h, w), dtype=np.uint8)
        data = pgm(w, h, raw.tobytes())
        assert encode_pgm(decode_pgm(data)) == data

    def test_file_round_trip(self, tmp_path):
        px = np.arange(12, dtype=float).reshape(3, 4) * 20
        save_gray_image(GrayImage(px, BYTE), tmp_path / "a.pgm")
        np.testing.assert_array_equal(load_gray_image(tmp_path / "a.pgm").pixels, px)

    def test_tensor_conversion(self):
        img = GrayImage(np.array([[0.0, 255.0]]), BYTE)
        t = to_tensor(img)
        assert t.shape == (1, 1, 1, 2)
        np.testing.assert_array_equal(t[0, 0], [[0.0, 1.0]])
        assert from_tensor(t).range == UNIT


def write_pair(d, ident, shape=(6, 8), seed=0, vis_shape=None):
    r = np.random.default_rng(seed)
    save_gray_image(GrayImage(r.integers(0, 256, size=shape).astype(float), BYTE), d / f"{ident}_ir.pgm")
    save_gray_image(GrayImage(r.integers(0, 256, size=vis_shape or shape).astype(float), BYTE), d / f"{ident}_vis.pgm")


class TestPairs:
    def test_matching_and_orphans(self, tmp_path):
        write_pair(tmp_path, "b", seed=1)
        write_pair(tmp_path, "a", seed=2)
        save_gray_image(GrayImage(np.zeros((2, 2)), BYTE), tmp_path / "c_ir.pgm")
        (tmp_path / "notes.txt").write_text("ignored")
        pairs, orphans = load_pairs(tmp_path)
        assert [p.identifier for p in pairs] == ["a", "b"]
        assert [o.endswith("c_ir.pgm") for o in orphans] == [True]

    def test_custom_suffixes(self, tmp_path):
        save_gray_image(GrayImage(np.zeros((2, 2)), BYTE), tmp_path / "s1-T.pgm")
        save_gray_image(GrayImage(np.zeros((2, 2)), BYTE), tmp_path / "s1-V.pgm")
        pairs, _ = load_pairs(tmp_path, "-T", "-V")
        assert [p.identifier for p in pairs] == ["s1"]

    def test_unregistered_pair(self, tmp_path):
        write_pair(tmp_path, "x", shape=(6, 8), vis_shape=(6, 9))
        with pytest.raises(RegistrationError, match="'x'"):
            load_pairs(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_pairs(tmp_path / "nope")


class TestPatches:
    def _pairs(self):
        r = np.random.default_rng(0)
        mk = lambda shape: GrayImage(r.uniform(0, 255, size=shape), BYTE)  # noqa: E731
        return [ImagePair(mk((20, 30)), mk((20, 30)), "p"), ImagePair(mk((17, 17)), mk((17, 17)), "q")]

    def test_in_bounds_and_aligned(self):
        pairs = self._pairs()
        by_id = {p.identifier: p for p in pairs}
        ps = sample_patches(pairs, 16, 1000, seed=3)
        assert len(ps) == 1000
        for (ir, vis), src, (r, c) in zip(ps.patches, ps.sources, ps.corners):
            h, w = by_id[src].infrared.pixels.shape
            assert 0 <= r <= h - 16 and 0 <= c <= w - 16
            assert ir.shape == vis.shape == (16, 16)
            np.testing.assert_array_equal(vis, by_id[src].visible.as_unit()[r : r + 16, c : c + 16])

    def test_64_pair_side_32_in_bounds(self):
        r = np.random.default_rng(1)
        mk = lambda: GrayImage(r.uniform(0, 255, size=(64, 64)), BYTE)  # noqa: E731
        ps = sample_patches([ImagePair(mk(), mk(), "s")], 32, 1000, seed=0)
        assert all(0 <= r <= 32 and 0 <= c <= 32 for r, c in ps.corners)
        assert len(sample_patches([ImagePair(mk(), mk(), "s")], 32, 0, seed=0)) == 0

    def test_deterministic(self):
        a = sample_patches(self._pairs(), 8, 20, seed=5)
        b = sample_patches(self._pairs(), 8, 20, seed=5)
        assert a.corners == b.corners and a.sources == b.sources

    def test_too_large(self):
        with pytest.raises(ConfigError, match="'q'"):
            sample_patches(self._pairs(), 18, 1, seed=0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = build_network(NetConfig(stages=2, scale=16, variant="hc", seed=4))
        save_checkpoint(net, tmp_path / "c.ifes")
        back = load_checkpoint(tmp_path / "c.ifes")
        assert back.config == net.config
        assert encode_checkpoint(back) == encode_checkpoint(net)

    def test_layout(self):
        net = build_network(NetConfig(stages=1, scale=16))
        data = encode_checkpoint(net)
        assert data[:4] == b"IFES"
        assert struct.unpack_from("<I", data, 4)[0] == 1
        n = struct.unpack_from("<I", data, 8)[0]
        floats = sum(l.weights.size + l.bias.size for l in net.layers())
        assert len(data) == 12 + n + 8 * floats + 4

    def test_flipped_byte(self):
        data = bytearray(encode_checkpoint(build_network(NetConfig(stages=1, scale=16))))
        data[40] ^= 0x01
        with pytest.raises(IntegrityError, match="CRC"):
            decode_checkpoint(bytes(data))

    def test_bad_magic_and_truncation(self):
        data = encode_checkpoint(build_network(NetConfig(stages=1, scale=16)))
        with pytest.raises(IntegrityError, match="magic"):
            decode_checkpoint(b"XXXX" + data[4:])
        with pytest.raises(IntegrityError):
            decode_checkpoint(data[:-10])
