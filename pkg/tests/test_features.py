import struct

import numpy as np
import pytest

from meftlab.harness.features import (
    FeatureFileError,
    fit_length,
    load_features,
    read_features,
    read_labels,
    write_features,
    write_labels,
)


def _mats(n=6, rows=(5, 9), cols=3, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(rows[i % 2], cols)).astype(np.float32) for i in range(n)]


def test_round_trip_is_bitwise(tmp_path):
    mats = _mats()
    write_features(tmp_path / "f.mfb", mats)
    back = read_features(tmp_path / "f.mfb")
    assert len(back) == len(mats)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(mats, back))


def test_file_layout_by_hand(tmp_path):
    write_features(tmp_path / "f.mfb", [np.array([[1.0, 2.0]], dtype=np.float32)])
    raw = (tmp_path / "f.mfb").read_bytes()
    assert raw == b"MFB1" + struct.pack("<III", 1, 1, 2) + struct.pack("<ff", 1.0, 2.0)


def test_fit_length_truncates_and_pads():
    m = np.arange(12.0).reshape(6, 2)
    assert np.array_equal(fit_length(m, 4), m[:4])
    padded = fit_length(m, 8)
    assert padded.shape == (8, 2) and np.array_equal(padded[:6], m) and np.all(padded[6:] == 0)


def test_longer_records_truncate_to_seq_len(tmp_path):
    n = 5
    mats = [np.full((n + 10, 2), k, dtype=np.float32) for k in range(4)]
    write_features(tmp_path / "f.mfb", mats)
    write_labels(tmp_path / "y.txt", [0, 1, 0, 1])
    d = load_features(tmp_path / "f.mfb", tmp_path / "y.txt", n, eval_frac=0.5)
    assert d.x_train.shape == (2, n, 2) and d.x_eval.shape == (2, n, 2)


def test_empty_file_reports_bad_magic(tmp_path):
    (tmp_path / "e.mfb").write_bytes(b"")
    with pytest.raises(FeatureFileError, match="bad magic.*byte offset 0") as info:
        read_features(tmp_path / "e.mfb")
    assert info.value.offset == 0


def test_truncated_file_reports_offset(tmp_path):
    write_features(tmp_path / "f.mfb", _mats(2))
    raw = (tmp_path / "f.mfb").read_bytes()
    (tmp_path / "t.mfb").write_bytes(raw[:-3])
    first = 4 + 4 + 8 + 5 * 3 * 4
    with pytest.raises(FeatureFileError, match=f"truncated.*byte offset {first + 8}"):
        read_features(tmp_path / "t.mfb")
    (tmp_path / "h.mfb").write_bytes(raw[:6])
    with pytest.raises(FeatureFileError, match="byte offset 4"):
        read_features(tmp_path / "h.mfb")


def test_trailing_bytes_rejected(tmp_path):
    write_features(tmp_path / "f.mfb", _mats(1))
    with open(tmp_path / "f.mfb", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(FeatureFileError, match="trailing"):
        read_features(tmp_path / "f.mfb")


def test_label_count_mismatch(tmp_path):
    write_features(tmp_path / "f.mfb", _mats(4))
    write_labels(tmp_path / "y.txt", [0, 1, 0])
    with pytest.raises(FeatureFileError, match="count mismatch"):
        load_features(tmp_path / "f.mfb", tmp_path / "y.txt", 8)


def test_width_mismatch_and_bad_labels(tmp_path):
    write_features(tmp_path / "f.mfb", [np.ones((2, 3)), np.ones((2, 4))])
    write_labels(tmp_path / "y.txt", [0, 1])
    with pytest.raises(FeatureFileError, match="width"):
        load_features(tmp_path / "f.mfb", tmp_path / "y.txt", 2)
    (tmp_path / "z.txt").write_text("0\nx\n")
    with pytest.raises(FeatureFileError, match="line 2"):
        read_labels(tmp_path / "z.txt")


def test_split_is_stratified_and_seeded(tmp_path):
    mats = _mats(20)
    labels = [i % 2 for i in range(20)]
    write_features(tmp_path / "f.mfb", mats)
    write_labels(tmp_path / "y.txt", labels)
    a = load_features(tmp_path / "f.mfb", tmp_path / "y.txt", 7, seed=3)
    b = load_features(tmp_path / "f.mfb", tmp_path / "y.txt", 7, seed=3)
    assert np.bincount(a.y_eval).tolist() == [2, 2]
    assert a.x_train.tobytes() == b.x_train.tobytes()
    assert len(a.x_train) + len(a.x_eval) == 20
