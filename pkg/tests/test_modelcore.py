"""Canonical serialization, hashing, updates, and queue invariants."""

import numpy as np
import pytest

from zksplit.errors import EncodingOverflow, ShapeError
from zksplit.modelcore import (HEADER_LEN, MAGIC, Checkpoint, ParamVector,
                               QueueState, apply_update, deserialize,
                               hash_bytes, hash_model, load, make_update,
                               pretrained_queue, save, serialize)


def vec(values, frac_bits=16):
    return ParamVector(np.asarray(values, dtype=np.int64), frac_bits)


class TestSerialization:
    def test_deterministic(self, nprng):
        pv = vec(nprng.integers(-2**30, 2**30, 64))
        assert serialize(pv) == serialize(pv)

    def test_header_and_payload_layout(self):
        pv = vec([1])
        data = serialize(pv)
        assert data[:4] == MAGIC
        assert data[4] == 1                       # version
        assert int.from_bytes(data[5:13], "little") == 1
        assert data[13] == 16
        assert data[HEADER_LEN:] == bytes([1, 0, 0, 0, 0, 0, 0, 0])

    def test_roundtrip_random(self, nprng):
        for _ in range(25):
            pv = vec(nprng.integers(-2**39, 2**39, int(nprng.integers(1, 200))))
            assert deserialize(serialize(pv)) == pv

    def test_single_entry_difference_changes_digest(self, nprng):
        raw = nprng.integers(-2**30, 2**30, 64)
        a, b = vec(raw), vec(np.concatenate([raw[:-1], raw[-1:] + 1]))
        assert hash_model(a) != hash_model(b)

    def test_file_roundtrip(self, tmp_path, nprng):
        pv = vec(nprng.integers(-2**30, 2**30, 32))
        path = tmp_path / "model.zkslm"
        save(pv, path)
        assert load(path) == pv

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            deserialize(b"XXXX" + bytes(20))


class TestHashing:
    def test_fips_empty_vector(self):
        assert hash_bytes(b"").hex() == (
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")

    def test_stable_across_calls(self, nprng):
        pv = vec(nprng.integers(-100, 100, 16))
        assert hash_model(pv) == hash_model(pv)

    def test_bit_flip_changes_digest(self):
        a, b = vec([5, 6]), vec([5, 7])
        assert hash_model(a) != hash_model(b)


class TestUpdates:
    def test_zero_update(self):
        m = vec([3, 5])
        assert np.array_equal(make_update(m, m).raw, [0, 0])

    def test_entrywise_difference(self):
        assert np.array_equal(make_update(vec([3, 5]), vec([1, 2])).raw, [2, 3])

    def test_apply_roundtrip(self, nprng):
        m = vec(nprng.integers(-2**20, 2**20, 40))
        c = vec(nprng.integers(-2**20, 2**20, 40))
        assert apply_update(c, make_update(m, c)) == m

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            make_update(vec([1, 2]), vec([1]))

    def test_magnitude_cap_enforced(self):
        with pytest.raises(EncodingOverflow):
            vec([1 << 40])


class TestCheckpointQueue:
    def _cp(self, rnd):
        m = vec([rnd, rnd + 1])
        return Checkpoint(model=m, update=vec([0, 0]), origin_client=0, round=rnd)

    def test_hashes_filled(self):
        cp = self._cp(1)
        assert cp.model_hash == hash_model(cp.model)
        assert cp.update_hash == hash_model(cp.update)

    def test_rounds_strictly_increase(self):
        with pytest.raises(ShapeError):
            QueueState(checkpoints=(self._cp(2), self._cp(1)), bm_index=0)

    def test_bm_in_range(self):
        with pytest.raises(ShapeError):
            QueueState(checkpoints=(self._cp(1),), bm_index=1)

    def test_pretrained_queue_contract(self):
        q = pretrained_queue(vec([7, 8, 9]), k=3)
        assert q.k == 3
        assert q.bm_index == 2
        assert all(len(c.update) == 3 for c in q.checkpoints)
        assert [c.round for c in q.checkpoints] == [-2, -1, 0]
        assert all(np.all(c.update.raw == 0) for c in q.checkpoints)
