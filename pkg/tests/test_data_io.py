import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceparse import data_io as dio
from faceparse.errors import ConfigError, DataError, FormatError
from faceparse.pipeline import PARTS, median_point


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = dio.SynthSpec(seed=3, count=8, val_count=2, test_count=2)
    return spec, dio.generate_synthetic(spec, root)


class TestTensorFile:
    def test_round_trip_bitwise(self, tmp_path, rng):
        x = rng.normal(size=(64, 64, 3)).astype(np.float32)
        path = tmp_path / "x.tensor"
        dio.write_tensor(path, x)
        y = dio.read_tensor(path)
        assert y.dtype == np.float64
        assert y.astype(np.float32).tobytes() == x.tobytes()

    def test_layout(self, tmp_path):
        x = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
        raw = dio.tensor_bytes(x)
        assert raw[:8] == b"ICNNTNSR"
        assert struct.unpack("<H3I", raw[8:22]) == (1, 1, 2, 3)
        assert raw[22:-4] == x.astype("<f4").tobytes()
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "x.tensor"
        dio.write_tensor(path, rng.normal(size=(4, 4, 3)))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            dio.read_tensor(path)

    def test_bad_magic_and_crc(self, tmp_path, rng):
        raw = bytearray(dio.tensor_bytes(rng.normal(size=(2, 2, 1))))
        path = tmp_path / "x.tensor"
        bad = bytearray(raw)
        bad[0:8] = b"XXXXXXXX"
        path.write_bytes(bytes(bad))
        with pytest.raises(dio.FileFormatError) as exc:
            dio.read_tensor(path)
        assert exc.value.reason == "magic"
        bad = bytearray(raw)
        bad[30] ^= 0xFF
        path.write_bytes(bytes(bad))
        with pytest.raises(dio.FileFormatError) as exc:
            dio.read_tensor(path)
        assert exc.value.reason == "crc"

    def test_dim_overflow(self, tmp_path):
        body = b"ICNNTNSR" + struct.pack("<H3I", 1, 2**31, 2**31, 3)
        path = tmp_path / "x.tensor"
        path.write_bytes(dio.with_crc(body))
        with pytest.raises(dio.FileFormatError) as exc:
            dio.read_tensor(path)
        assert exc.value.reason in ("dims", "truncated")

    def test_version(self, tmp_path):
        raw = bytearray(dio.tensor_bytes(np.zeros((1, 1, 1))))
        raw[8:10] = struct.pack("<H", 2)
        path = tmp_path / "x.tensor"
        path.write_bytes(dio.with_crc(bytes(raw[:-4])))
        with pytest.raises(dio.FileFormatError) as exc:
            dio.read_tensor(path)
        assert exc.value.reason == "version"


class TestLabelFile:
    def test_round_trip(self, tmp_path, rng):
        lab = rng.integers(0, 9, (17, 5))
        path = tmp_path / "a.labels"
        dio.write_labels(path, lab)
        np.testing.assert_array_equal(dio.read_labels(path), lab)

    def test_class_byte_out_of_range(self, tmp_path):
        body = b"ICNNLBLS" + struct.pack("<H2IB", 1, 1, 2, 9) + bytes([0, 9])
        path = tmp_path / "a.labels"
        path.write_bytes(dio.with_crc(body))
        with pytest.raises(dio.FileFormatError) as exc:
            dio.read_labels(path)
        assert exc.value.reason == "range"

    def test_writer_rejects_out_of_range(self, tmp_path):
        with pytest.raises(DataError):
            dio.write_labels(tmp_path / "a.labels", np.full((2, 2), 9))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            dio.read_labels(tmp_path / "nope.labels")


@settings(max_examples=100)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_tensor_round_trip_property(h, w, c, seed):
    x = np.random.default_rng(seed).normal(size=(h, w, c)).astype(np.float32)
    raw = dio.tensor_bytes(x)
    r = dio.Reader("<mem>", raw, dio.TENSOR_MAGIC)
    assert r.unpack("<3I") == (h, w, c)
    np.testing.assert_array_equal(r.array("<f4", h * w * c).reshape(h, w, c), x)


class TestManifest:
    def write(self, tmp_path, lines, shapes=((4, 4, 3), (4, 4))):
        for i in range(3):
            dio.write_tensor(tmp_path / f"i{i}.tensor", np.full(shapes[0], float(i)))
            dio.write_labels(tmp_path / f"l{i}.labels", np.zeros(shapes[1], int))
        path = tmp_path / "m.txt"
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_split_filter_and_order(self, tmp_path):
        m = self.write(tmp_path, ["# c", "i0.tensor l0.labels train", "i1.tensor l1.labels val",
                                  "", "i2.tensor l2.labels train"])
        val = dio.load_dataset(m, "val")
        assert len(val) == 1 and val[0][0][0, 0, 0] == 1.0
        train = dio.load_dataset(m, "train")
        assert [x[0, 0, 0] for x, _ in train] == [0.0, 2.0]
        assert dio.load_dataset(m, "test") == []

    def test_dim_mismatch_names_line(self, tmp_path):
        m = self.write(tmp_path, ["i0.tensor l0.labels train"], shapes=((8, 8, 3), (4, 4)))
        with pytest.raises(DataError, match=":1"):
            dio.load_dataset(m, "train")

    def test_missing_file_names_line(self, tmp_path):
        m = self.write(tmp_path, ["# header", "i0.tensor l0.labels train", "i9.tensor l0.labels train"])
        with pytest.raises(DataError, match=":3"):
            dio.load_dataset(m, "train")

    def test_bad_split(self, tmp_path):
        m = self.write(tmp_path, ["i0.tensor l0.labels holdout"])
        with pytest.raises(DataError):
            dio.read_manifest(m)


class TestSynthetic:
    def test_deterministic(self, tmp_path, small_dataset):
        spec, manifest = small_dataset
        again = dio.generate_synthetic(spec, tmp_path / "again")
        assert dio.dataset_checksum(again) == dio.dataset_checksum(manifest)

    def test_seed_changes_data(self, tmp_path, small_dataset):
        spec, manifest = small_dataset
        other = dio.generate_synthetic(dio.SynthSpec(seed=4, count=8, val_count=2, test_count=2), tmp_path)
        assert dio.dataset_checksum(other) != dio.dataset_checksum(manifest)

    def test_split_sizes(self, small_dataset):
        _, manifest = small_dataset
        assert [len(dio.load_dataset(manifest, s)) for s in dio.SPLITS] == [4, 2, 2]

    def test_all_nine_classes_present(self, small_dataset):
        _, manifest = small_dataset
        for split in dio.SPLITS:
            for _, labels in dio.load_dataset(manifest, split):
                assert set(np.unique(labels)) == set(range(9))

    def test_sidecar_medians_match_median_point(self, small_dataset):
        _, manifest = small_dataset
        data = dio.load_dataset(manifest, "train")
        centers = dio.load_part_centers(manifest, "train")
        for (_, labels), c in zip(data, centers):
            for part in PARTS:
                assert tuple(c[part.name]) == median_point(labels, part.classes)

    def test_colour_consistency(self, small_dataset):
        _, manifest = small_dataset
        for rec in dio.read_manifest(manifest):
            image, labels = dio.read_tensor(rec.image), dio.read_labels(rec.labels)
            colors = np.array(json.loads(rec.image.with_suffix(".json").read_text())["class_colors"])
            for c in range(1, 9):
                mask = labels == c
                close = np.abs(image[mask] - colors[c]).max(axis=1) < 0.1
                assert close.mean() >= 0.95

    def test_left_right_ordering(self, small_dataset):
        _, manifest = small_dataset
        for c in dio.load_part_centers(manifest, "train"):
            assert c["left_eye"][1] < c["right_eye"][1]
            assert c["left_eyebrow"][1] < c["right_eyebrow"][1]

    def test_count_zero(self, tmp_path):
        m = dio.generate_synthetic(dio.SynthSpec(count=0), tmp_path)
        assert dio.read_manifest(m) == []

    @pytest.mark.parametrize("key,value", [("size_jitter", 0.9), ("brow_tilt", 60.0),
                                           ("face_shift", 200.0), ("noise", -1.0)])
    def test_invalid_spec_names_key(self, tmp_path, key, value):
        spec = dio.SynthSpec(**{key: value})
        with pytest.raises(ConfigError, match=key):
            dio.generate_synthetic(spec, tmp_path)

    def test_smaller_frame(self):
        spec = dio.SynthSpec(image_size=128, face_shift=4, part_shift=1.5)
        image, labels, _ = dio.render_face(spec, np.random.default_rng(0))
        assert image.shape == (128, 128, 3)
        assert set(np.unique(labels)) == set(range(9))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_generated_faces_valid_property(seed):
    spec = dio.SynthSpec(image_size=96, face_shift=3, part_shift=1)
    image, labels, _ = dio.render_face(spec, np.random.default_rng(seed))
    assert image.min() >= 0 and image.max() <= 1
    assert set(np.unique(labels)) == set(range(9))
