import numpy as np
import pytest

from musedec import msed


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 4), (2, 2, 2, 3)])
def test_round_trip_identity(tmp_path, dtype, shape):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=shape).astype(dtype)
    path = tmp_path / "t.msed"
    msed.write_tensor(path, arr)
    back = msed.read_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert np.array_equal(back.view(np.uint8), arr.view(np.uint8))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.msed"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(msed.BadMagic):
        msed.read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.msed"
    msed.write_tensor(path, np.ones((4, 4)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(msed.DimMismatch):
        msed.read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.msed"
    msed.write_tensor(path, np.ones(2))
    blob = bytearray(path.read_bytes())
    blob[5] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(msed.MsedError):
        msed.read_tensor(path)


def test_duplicate_ids_rejected(tmp_path):
    path = tmp_path / "ids.json"
    msed.write_ids(path, ["a", "b", "a"])
    with pytest.raises(msed.ManifestError):
        msed.read_ids(path)


def test_labels_csv_round_trip(tmp_path):
    labels = np.array([[1, 0, 1], [0, 1, 0]], dtype=np.float64)
    path = tmp_path / "labels.csv"
    msed.write_labels_csv(path, ["s0", "s1"], labels)
    ids, back = msed.read_labels_csv(path)
    assert ids == ["s0", "s1"]
    np.testing.assert_array_equal(back, labels)


def test_fuzz_round_trip_corpus(tmp_path):
    rng = np.random.default_rng(1234)
    for i in range(100):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 6)) for _ in range(ndim))
        dtype = np.float32 if rng.integers(2) else np.float64
        arr = rng.normal(size=shape).astype(dtype)
        path = tmp_path / f"f{i}.msed"
        msed.write_tensor(path, arr)
        back = msed.read_tensor(path)
        assert np.array_equal(back.view(np.uint8), arr.view(np.uint8))
        assert back.dtype == arr.dtype and back.shape == arr.shape
