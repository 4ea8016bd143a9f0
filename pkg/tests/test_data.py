import json

import numpy as np
import pytest
from conftest import toy_config
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsnet.data import (
    CheckpointError,
    CodecError,
    DatasetError,
    Sample,
    decode_checkpoint,
    decode_pgm,
    decode_ppm,
    encode_checkpoint,
    encode_pgm,
    encode_ppm,
    load_checkpoint,
    read_image,
    read_label,
    resize_pair,
    save_checkpoint,
    scan_dataset,
    synthetic_samples,
    write_dataset,
    write_image,
    write_label,
)
from dsnet.data.checkpoint import ALIGN
from dsnet.model import build_dsnet, forward


class TestPpm:
    def test_white_pixel(self, tmp_path):
        (tmp_path / "w.ppm").write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        assert np.array_equal(read_image(tmp_path / "w.ppm"), np.ones((1, 3, 1, 1), np.float32))

    def test_two_pixels(self, tmp_path):
        (tmp_path / "rb.ppm").write_bytes(b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff")
        img = read_image(tmp_path / "rb.ppm")[0]
        assert img[0].ravel().tolist() == [1, 0] and img[2].ravel().tolist() == [0, 1]

    def test_pgm_is_rejected(self, tmp_path):
        (tmp_path / "g.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(CodecError, match="unsupported format"):
            read_image(tmp_path / "g.ppm")

    def test_header_comment(self):
        assert decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").ravel().tolist() == [1, 2, 3]

    def test_truncated(self):
        with pytest.raises(CodecError, match="truncated payload"):
            decode_ppm(b"P6\n2 2\n255\n\x00\x00")

    def test_maxval(self):
        with pytest.raises(CodecError, match="maxval"):
            decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")

    def test_malformed(self):
        with pytest.raises(CodecError, match="malformed header"):
            decode_ppm(b"P6\nab 1\n255\n")

    @given(arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 6), st.integers(1, 6))))
    def test_round_trip(self, rgb):
        assert np.array_equal(decode_ppm(encode_ppm(rgb)), rgb)

    def test_float_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (1, 3, 4, 5)) / 255.0
        write_image(tmp_path / "x.ppm", img)
        np.testing.assert_allclose(read_image(tmp_path / "x.ppm"), img, atol=1e-7)


class TestPgm:
    def test_all_zero(self, tmp_path):
        write_label(tmp_path / "z.pgm", np.zeros((3, 4), np.uint8))
        assert np.array_equal(read_label(tmp_path / "z.pgm", 19), np.zeros((3, 4)))

    def test_ignore_is_kept(self, tmp_path):
        write_label(tmp_path / "i.pgm", np.array([[255, 1]]))
        assert read_label(tmp_path / "i.pgm", 19, 255).tolist() == [[255, 1]]

    def test_out_of_range(self, tmp_path):
        write_label(tmp_path / "o.pgm", np.array([[19]]))
        with pytest.raises(CodecError, match="19"):
            read_label(tmp_path / "o.pgm", 19, 255)

    @given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
    def test_round_trip(self, gray):
        assert np.array_equal(decode_pgm(encode_pgm(gray)), gray)


class TestResizePair:
    def sample(self):
        rng = np.random.default_rng(0)
        return Sample(rng.random((1, 3, 8, 10)).astype(np.float32), rng.integers(0, 5, (8, 10)), "s")

    def test_identity(self):
        s = self.sample()
        r = resize_pair(s, 8, 10)
        assert np.array_equal(r.image, s.image) and np.array_equal(r.label, s.label)

    @given(st.integers(1, 20), st.integers(1, 20))
    def test_label_values_preserved(self, h, w):
        s = self.sample()
        assert set(np.unique(resize_pair(s, h, w).label)) <= set(np.unique(s.label))

    def test_constant_image(self):
        s = Sample(np.full((1, 3, 5, 5), 0.25, np.float32), np.zeros((5, 5), np.int64))
        np.testing.assert_allclose(resize_pair(s, 13, 3).image, 0.25, atol=1e-7)

    def test_shapes(self):
        r = resize_pair(self.sample(), 4, 5)
        assert r.image.shape == (1, 3, 4, 5) and r.label.shape == (4, 5)


class TestScan:
    def test_lexicographic(self, tmp_path):
        samples = synthetic_samples(3, 8, 8, 3)
        for s, name in zip(samples, ["c", "a", "b"]):
            s.id = name
        write_dataset(tmp_path, "train", samples)
        index = scan_dataset(tmp_path, "train", 3)
        assert len(index) == 3 and index.stems == ["a", "b", "c"]
        assert index[0].image.shape == (1, 3, 8, 8)

    def test_missing_label(self, tmp_path):
        write_dataset(tmp_path, "train", synthetic_samples(2, 8, 8, 3))
        (tmp_path / "labels" / "train" / "synth_001.pgm").unlink()
        with pytest.raises(DatasetError, match="synth_001"):
            scan_dataset(tmp_path, "train", 3)

    def test_empty_split(self, tmp_path):
        (tmp_path / "images" / "val").mkdir(parents=True)
        with pytest.raises(DatasetError, match="empty split"):
            scan_dataset(tmp_path, "val", 3)

    def test_sidecar(self, tmp_path):
        write_dataset(tmp_path, "train", synthetic_samples(1, 8, 8, 3))
        (tmp_path / "classes.json").write_text(json.dumps({"names": ["bg", "a", "b"], "ignore_index": 250}))
        index = scan_dataset(tmp_path, "train", 3)
        assert index.class_names == ["bg", "a", "b"] and index.ignore_index == 250

    def test_synthetic_round_trip_is_lossless(self, tmp_path):
        samples = synthetic_samples(2, 16, 16, 4)
        write_dataset(tmp_path, "train", samples)
        for s, loaded in zip(samples, scan_dataset(tmp_path, "train", 4)):
            assert np.array_equal(s.image, loaded.image) and np.array_equal(s.label, loaded.label)


class TestCheckpoint:
    def test_byte_identical_resave(self, tmp_path, toy_fast):
        graph, params = toy_fast
        save_checkpoint(graph, params, {"note": "x"}, tmp_path / "a.dsn")
        g2, p2, meta = load_checkpoint(tmp_path / "a.dsn")
        save_checkpoint(g2, p2, meta, tmp_path / "b.dsn")
        assert (tmp_path / "a.dsn").read_bytes() == (tmp_path / "b.dsn").read_bytes()
        assert meta == {"note": "x"} and g2 == graph

    def test_forward_bit_identical(self, tmp_path, toy_accurate):
        graph, params = toy_accurate
        save_checkpoint(graph, params, None, tmp_path / "m.dsn")
        g2, p2, _ = load_checkpoint(tmp_path / "m.dsn")
        x = np.random.default_rng(0).random((1, 3, 32, 48)).astype(np.float32)
        assert np.array_equal(forward(graph, params, x).data, forward(g2, p2, x).data)

    def test_alignment(self, toy_fast):
        buf = encode_checkpoint(*toy_fast)
        header_len = int.from_bytes(buf[4:8], "little")
        header = json.loads(buf[8 : 8 + header_len])
        assert (8 + header_len) % ALIGN == 0
        assert all(t["byte_offset"] % ALIGN == 0 for t in header["tensors"])

    def test_bad_magic(self, toy_fast):
        buf = bytearray(encode_checkpoint(*toy_fast))
        buf[0:4] = b"NOPE"
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(bytes(buf))

    def test_version_mismatch(self, toy_fast):
        buf = encode_checkpoint(*toy_fast)
        header_len = int.from_bytes(buf[4:8], "little")
        text = buf[8 : 8 + header_len].replace(b'"format_version":1', b'"format_version":9')
        with pytest.raises(CheckpointError, match="version mismatch"):
            decode_checkpoint(buf[:8] + text + buf[8 + header_len :])

    def test_truncated(self, toy_fast):
        buf = encode_checkpoint(*toy_fast)
        with pytest.raises(CheckpointError):
            decode_checkpoint(buf[:-100])

    def test_shape_mismatch_vs_graph(self, toy_fast):
        graph, params = toy_fast
        other_graph, _ = build_dsnet(toy_config(num_classes=5))
        buf = encode_checkpoint(graph, params)
        header_len = int.from_bytes(buf[4:8], "little")
        header = json.loads(buf[8 : 8 + header_len])
        header["graph"] = other_graph.to_json()
        text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        pad = (-(8 + len(text))) % ALIGN
        text += b" " * pad
        with pytest.raises(CheckpointError, match="shape mismatch"):
            decode_checkpoint(b"DSN1" + len(text).to_bytes(4, "little") + text + buf[8 + header_len :])

    def test_float64_round_trip(self, tmp_path):
        graph, params = build_dsnet(toy_config(), seed=2, dtype=np.float64)
        save_checkpoint(graph, params, {}, tmp_path / "d.dsn")
        _, p2, _ = load_checkpoint(tmp_path / "d.dsn")
        a, b = params.arrays(), p2.arrays()
        assert all(b[k].dtype == np.float64 and np.array_equal(a[k], b[k]) for k in a)

    def test_no_temp_file_left(self, tmp_path, toy_fast):
        save_checkpoint(*toy_fast, {}, tmp_path / "m.dsn")
        assert [p.name for p in tmp_path.iterdir()] == ["m.dsn"]
