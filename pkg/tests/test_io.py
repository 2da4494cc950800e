"""Named-tensor container and random-stream plumbing.

Round-trips are asserted at the byte level, not just value level, since
checkpoint resume promises bit-identical continuation.
"""

import hashlib
import json

import numpy as np
import pytest

from dplx.errors import ConfigError, FormatError
from dplx.rng import STREAM_NAMES, RngHub, stream_seed
from dplx.tensorfile import load_tensors, save_tensors


class TestTensorFile:
    def test_roundtrip_all_dtypes_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "weights/a": rng.normal(size=(3, 4)).astype(np.float32),
            "weights/b": rng.normal(size=(2, 3, 2)),
            "steps": np.arange(-4, 4, dtype=np.int64),
            "scalar": np.float64(-0.0).reshape(()),
            "empty": np.zeros((0, 5), dtype=np.float32),
        }
        path = tmp_path / "pack.dplx"
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert list(loaded) == list(tensors)
        for name, arr in tensors.items():
            got = loaded[name]
            assert got.dtype == arr.dtype
            assert got.shape == arr.shape
            assert got.tobytes() == arr.tobytes()

    def test_empty_container(self, tmp_path):
        path = tmp_path / "none.dplx"
        save_tensors(path, {})
        assert load_tensors(path) == {}

    def test_unicode_names(self, tmp_path):
        path = tmp_path / "u.dplx"
        save_tensors(path, {"poids/étape": np.zeros(2, dtype=np.float64)})
        assert "poids/étape" in load_tensors(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(FormatError):
            save_tensors(tmp_path / "x.dplx", {"a": np.zeros(2, dtype=np.int32)})
        with pytest.raises(FormatError):
            save_tensors(tmp_path / "y.dplx", {"a": np.zeros(2, dtype=np.float16)})

    def test_overlong_name(self, tmp_path):
        with pytest.raises(FormatError):
            save_tensors(tmp_path / "n.dplx", {"n" * 70000: np.zeros(1)})

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.dplx"
        save_tensors(path, {"a": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        blob[0] = ord("X")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_tensors(path)

    def test_bad_endian_tag(self, tmp_path):
        path = tmp_path / "e.dplx"
        save_tensors(path, {"a": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        blob[5] = ord("B")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="endian"):
            load_tensors(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.dplx"
        save_tensors(path, {"a": np.zeros(4)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_tensors(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "g.dplx"
        save_tensors(path, {"a": np.zeros(2)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_tensors(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "c.dplx"
        save_tensors(path, {"ab": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        # header: magic(5) endian(1) count(4) name_len(2) name(2) dtype(1)
        blob[14] = ord("z")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="dtype code"):
            load_tensors(path)


class TestStreamSeeds:
    def test_matches_hash_recipe(self):
        # first 8 digest bytes of "seed:name", little-endian
        expect = int.from_bytes(
            hashlib.sha256(b"0:init").digest()[:8], "little")
        assert stream_seed(0, "init") == expect

    def test_frozen_values(self):
        assert stream_seed(0, "init") == 12661729028628668771
        assert stream_seed(7, "data") == 10053001140968393857

    def test_streams_distinct(self):
        seeds = {stream_seed(3, n) for n in STREAM_NAMES}
        assert len(seeds) == len(STREAM_NAMES)


class TestRngHub:
    def test_unknown_stream_rejected(self):
        hub = RngHub(0)
        with pytest.raises(ConfigError):
            hub.stream("entropy")
        with pytest.raises(ConfigError):
            hub.derived("entropy", 0)

    def test_same_seed_same_draws(self):
        a = RngHub(9).stream("init").normal(size=5)
        b = RngHub(9).stream("init").normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        hub1 = RngHub(9)
        hub1.stream("dropout").normal(size=100)
        after_dropout_use = hub1.stream("init").normal(size=5)
        untouched = RngHub(9).stream("init").normal(size=5)
        np.testing.assert_array_equal(after_dropout_use, untouched)

    def test_state_roundtrip_resumes_exactly(self):
        hub = RngHub(4)
        hub.stream("data").normal(size=3)
        hub.stream("diffusion-noise").normal(size=2)
        snap = hub.state()
        expect = hub.stream("data").normal(size=6)
        expect2 = hub.stream("diffusion-noise").normal(size=6)
        other = RngHub(999)
        other.set_state(snap)
        np.testing.assert_array_equal(other.stream("data").normal(size=6), expect)
        np.testing.assert_array_equal(
            other.stream("diffusion-noise").normal(size=6), expect2)
        assert other.master_seed == 4

    def test_state_survives_json(self):
        hub = RngHub(4)
        hub.stream("init").normal(size=7)
        snap = json.loads(json.dumps(hub.state()))
        expect = hub.stream("init").normal(size=4)
        other = RngHub(0)
        other.set_state(snap)
        np.testing.assert_array_equal(other.stream("init").normal(size=4), expect)

    def test_untouched_streams_not_snapshotted(self):
        hub = RngHub(4)
        hub.stream("init")
        assert set(hub.state()["streams"]) == {"init"}

    def test_derived_is_pure(self):
        hub = RngHub(11)
        a = hub.derived("data", 3).normal(size=4)
        b = hub.derived("data", 3).normal(size=4)
        c = hub.derived("data", 4).normal(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_derived_does_not_disturb_stream(self):
        hub = RngHub(11)
        hub.stream("data")
        before = hub.state()
        hub.derived("data", 5).normal(size=10)
        assert hub.state() == before
