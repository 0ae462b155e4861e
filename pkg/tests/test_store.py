"""
Tests for loopguard.store module.

Tests the long-term memory database: read-your-writes, persistence across
reopen, word reference rewrites and the asynchronous writer.
"""

import random
import time

import pytest

from loopguard.dictionary import Signature
from loopguard.exceptions import StoreError, StoreIOError
from loopguard.store import LongTermStore, StoredLocation
from tests.helpers import make_record, make_word


@pytest.mark.unit
class TestStoredLocation:
    """Test StoredLocation records."""

    def test_dict_round_trip(self):
        """Test a record with words survives to_dict/from_dict."""
        record = make_record(4, word_ids=(1, 2, 9), weight=3, words=[make_word(9)])
        assert StoredLocation.from_dict(record.to_dict()) == record

    def test_remapped_untouched_returns_same_object(self):
        """Test remapping with unrelated ids does not copy."""
        record = make_record(1, word_ids=(1, 2))
        assert record.remapped({7: 8}) is record

    def test_remapped_merges_multiplicities(self):
        """Test two old ids mapped to one word add up."""
        record = make_record(1, word_ids=(1, 2))
        remapped = record.remapped({1: 5, 2: 5})
        assert remapped.signature == Signature({5: 2})
        assert record.signature == Signature({1: 1, 2: 1})


@pytest.mark.unit
class TestPersistFetch:
    """Test persist and fetch."""

    def test_fetch_before_flush(self, store):
        """Test a queued record is visible immediately."""
        record = make_record(3, weight=2)
        store.persist(record)
        assert store.fetch(3) == record
        assert 3 in store
        assert len(store) == 1

    def test_fetch_after_flush(self, store):
        """Test a written record is read back from disk."""
        record = make_record(3, words=[make_word(2)])
        store.persist(record)
        store.flush()
        assert store.get_stats()["pending_writes"] == 0
        assert store.fetch(3) == record

    def test_fetch_missing_returns_none(self, store):
        """Test a never persisted id is reported as None, not an error."""
        assert store.fetch(42) is None
        assert 42 not in store

    def test_ids_sorted(self, store):
        """Test ids() lists pending and written records in order."""
        for location_id in (5, 1, 3):
            store.persist(make_record(location_id))
        store.flush()
        store.persist(make_record(2))
        assert store.ids() == [1, 2, 3, 5]

    def test_persist_again_replaces(self, store):
        """Test the newest record of an id wins."""
        store.persist(make_record(1, weight=0))
        store.flush()
        store.persist(make_record(1, weight=4))
        assert store.fetch(1).weight == 4
        store.flush()
        assert store.fetch(1).weight == 4
        assert len(store) == 1


@pytest.mark.unit
class TestReopen:
    """Test the database survives close and reopen."""

    def test_thousand_records(self, tmp_path):
        """Test 1000 records are all readable after reopening."""
        path = tmp_path / "ltm.db"
        records = [make_record(i, word_ids=(i, i + 1), weight=i % 3) for i in range(1000)]
        with LongTermStore(path) as store:
            for record in records:
                store.persist(record)

        with LongTermStore(path) as store:
            assert len(store) == 1000
            for record in records:
                assert store.fetch(record.location_id) == record

    def test_discard_survives_reopen(self, tmp_path):
        """Test a discarded record stays gone."""
        path = tmp_path / "ltm.db"
        with LongTermStore(path) as store:
            store.persist(make_record(1))
            store.persist(make_record(2))
            assert store.discard(1) is True
            assert store.discard(99) is False
            assert store.fetch(1) is None

        with LongTermStore(path) as store:
            assert store.ids() == [2]

    def test_truncated_tail_is_dropped(self, tmp_path, caplog):
        """Test a partial frame at the end is discarded with a warning."""
        path = tmp_path / "ltm.db"
        with LongTermStore(path) as store:
            for i in range(3):
                store.persist(make_record(i))
        with open(path, "ab") as f:
            f.write(b"\x01\x05\x00")

        with caplog.at_level("WARNING", logger="loopguard.store"):
            with LongTermStore(path) as store:
                assert store.ids() == [0, 1, 2]
                store.persist(make_record(3))
        assert "truncated frame" in caplog.text

        with LongTermStore(path) as store:
            assert store.ids() == [0, 1, 2, 3]

    def test_bad_magic(self, tmp_path):
        """Test a foreign file is rejected."""
        path = tmp_path / "ltm.db"
        path.write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(StoreIOError, match="magic"):
            LongTermStore(path)

    def test_bad_version(self, tmp_path):
        """Test an unknown version is rejected."""
        path = tmp_path / "ltm.db"
        path.write_bytes(b"LGLT\x09\x00\x00\x00")
        with pytest.raises(StoreIOError, match="version"):
            LongTermStore(path)


@pytest.mark.unit
class TestRewriteWordRefs:
    """Test rewrite_word_refs."""

    def test_empty_mapping(self, store):
        """Test an empty mapping touches nothing."""
        store.persist(make_record(1, word_ids=(7,)))
        assert store.rewrite_word_refs({}) == 0
        assert store.rewrite_word_refs({7: 7}) == 0

    def test_single_reference(self, store):
        """Test one referencing record is rewritten."""
        store.persist(make_record(1, word_ids=(7, 8)))
        store.persist(make_record(2, word_ids=(8,)))
        assert store.rewrite_word_refs({7: 12}) == 1
        assert store.fetch(1).signature == Signature({12: 1, 8: 1})
        assert store.fetch(2).signature == Signature({8: 1})
        assert store.references_word(12)
        assert not store.references_word(7)

    def test_rewrite_of_written_record(self, store, tmp_path):
        """Test the rewrite reaches disk and survives reopen."""
        store.persist(make_record(1, word_ids=(7,)))
        store.flush()
        store.rewrite_word_refs({7: 12})
        assert store.fetch(1).signature == Signature({12: 1})
        store.flush()
        assert store.get_stats()["pending_rewrites"] == 0
        assert store.fetch(1).signature == Signature({12: 1})
        store.close()

        with LongTermStore(tmp_path / "ltm.db") as reopened:
            assert reopened.fetch(1).signature == Signature({12: 1})

    def test_touched_count_matches_scan(self, store):
        """Test the touched count equals a brute-force scan over random records."""
        rng = random.Random(5)
        records = []
        for location_id in range(60):
            word_ids = rng.sample(range(40), rng.randint(1, 6))
            record = make_record(location_id, word_ids=word_ids)
            records.append(record)
            store.persist(record)
            if location_id == 30:
                store.flush()

        mapping = {old: 100 + old for old in rng.sample(range(40), 5)}
        expected = sum(1 for r in records if any(w in mapping for w in r.signature))
        assert store.rewrite_word_refs(mapping) == expected
        store.flush()
        for record in records:
            fetched = store.fetch(record.location_id)
            assert fetched.signature == record.signature.remapped(mapping)


@pytest.mark.unit
class TestWords:
    """Test keep_words and fetch_words."""

    def test_record_words_are_fetchable(self, store):
        """Test words carried by a record are found before and after flush."""
        store.persist(make_record(1, word_ids=(3, 4), words=[make_word(3), make_word(4)]))
        assert set(store.fetch_words([3, 4, 5])) == {3, 4}
        store.flush()
        found = store.fetch_words([3, 4, 5])
        assert found[3] == make_word(3)
        assert 5 not in found

    def test_keep_words_only_referenced(self, store):
        """Test keep_words ignores words no stored record references."""
        store.persist(make_record(1, word_ids=(3,)))
        assert store.keep_words([make_word(3), make_word(9)]) == 1
        assert store.keep_words([make_word(9)]) == 0
        store.flush()
        assert set(store.fetch_words([3, 9])) == {3}


@pytest.mark.unit
class TestWriterThread:
    """Test the asynchronous writer."""

    def test_persist_does_not_wait_for_disk(self, store, mocker):
        """Test enqueueing stays fast while every disk write takes 50 ms."""
        original = LongTermStore._write_frame

        def slow_write(self, kind, payload):
            time.sleep(0.05)
            return original(self, kind, payload)

        mocker.patch.object(LongTermStore, "_write_frame", autospec=True, side_effect=slow_write)

        durations = []
        for i in range(20):
            record = make_record(i)
            start = time.perf_counter()
            store.persist(record)
            durations.append(time.perf_counter() - start)
            assert store.fetch(i) == record

        assert max(durations) < 0.002
        assert store.get_stats()["pending_writes"] > 0
        store.flush()
        assert store.get_stats()["pending_writes"] == 0
        assert store.get_stats()["frames_written"] == 20

    def test_writer_failure_surfaces(self, store, mocker):
        """Test a failed write is reported by flush and later calls."""
        mocker.patch.object(store, "_write_frame", side_effect=OSError("disk full"))
        store.persist(make_record(1))
        with pytest.raises(StoreIOError, match="disk full"):
            store.flush()
        with pytest.raises(StoreIOError):
            store.persist(make_record(2))

    def test_read_failure_is_an_error_not_none(self, store, mocker):
        """Test an unreadable record raises instead of looking absent."""
        store.persist(make_record(1))
        store.flush()
        mocker.patch.object(store, "_reader")
        store._reader.seek.side_effect = OSError("disk gone")
        with pytest.raises(StoreIOError, match="disk gone"):
            store.fetch(1)

    def test_closed_store_rejects_calls(self, tmp_path):
        """Test a closed store raises StoreError."""
        store = LongTermStore(tmp_path / "ltm.db")
        store.close()
        store.close()
        with pytest.raises(StoreError):
            store.persist(make_record(1))

    def test_get_stats(self, store):
        """Test statistics keys."""
        store.persist(make_record(1, words=[make_word(1)]))
        store.flush()
        stats = store.get_stats()
        assert stats["locations"] == 1
        assert stats["frames_written"] == 1
        assert stats["words_indexed"] == 1
        assert stats["queued_jobs"] == 0
        assert stats["path"].endswith("ltm.db")
