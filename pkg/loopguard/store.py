"""
Long-term memory database.

Locations transferred out of working memory are written to a single
append-only file by a background thread. Readers see queued writes
immediately (read-your-writes) and an in-memory id index, rebuilt when the
file is opened, points at the newest frame of every stored location.

File layout: magic ``LGLT``, u32 version, then frames of
``u8 kind | u32 length | JSON payload``.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Mapping, Optional, Set, Tuple, Union
import itertools
import json
import logging
import os
import queue
import struct
import threading

from loopguard import constants
from loopguard.dictionary import Signature, VisualWord
from loopguard.exceptions import StoreError, StoreIOError

if TYPE_CHECKING:
    from loopguard.memory import Location

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_FILE_HEADER = struct.Struct("<4sI")
_FRAME_HEADER = struct.Struct("<BI")

FRAME_LOCATION = 1
FRAME_BATCH = 2
FRAME_DISCARD = 3
FRAME_WORDS = 4


def _word_to_dict(word: VisualWord) -> Dict[str, Any]:
    return {"id": int(word.word_id), "descriptor": [float(x) for x in word.descriptor]}


def _word_from_dict(data: Mapping[str, Any]) -> VisualWord:
    return VisualWord(int(data["id"]), data["descriptor"])


@dataclass
class StoredLocation:
    """
    A location as kept in long-term memory.

    Attributes:
        location_id: Location id
        weight: Weight at transfer time
        signature: Word ids with multiplicities
        neighbor_links: Linked location ids
        member_images: Images merged into the location
        created_at: Iteration that created the location
        words: Words orphaned by this location's transfer, without references
    """

    location_id: int
    weight: int
    signature: Signature
    neighbor_links: List[int] = field(default_factory=list)
    member_images: List[int] = field(default_factory=list)
    created_at: int = 0
    words: List[VisualWord] = field(default_factory=list)

    @classmethod
    def from_location(
        cls, location: "Location", orphans: Iterable[VisualWord] = ()
    ) -> "StoredLocation":
        return cls(
            location_id=location.location_id,
            weight=location.weight,
            signature=Signature(location.signature),
            neighbor_links=sorted(location.links),
            member_images=list(location.member_images),
            created_at=location.created_at,
            words=[word.detached() for word in orphans],
        )

    def remapped(self, mapping: Mapping[int, int]) -> "StoredLocation":
        """Copy with signature word ids replaced through ``mapping``."""
        if not any(word_id in mapping for word_id in self.signature):
            return self
        return StoredLocation(
            location_id=self.location_id,
            weight=self.weight,
            signature=self.signature.remapped(mapping),
            neighbor_links=list(self.neighbor_links),
            member_images=list(self.member_images),
            created_at=self.created_at,
            words=list(self.words),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.location_id,
            "weight": self.weight,
            "signature": self.signature.to_pairs(),
            "links": sorted(self.neighbor_links),
            "members": list(self.member_images),
            "created_at": self.created_at,
            "words": [_word_to_dict(word) for word in self.words],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StoredLocation":
        return cls(
            location_id=int(data["id"]),
            weight=int(data["weight"]),
            signature=Signature.from_pairs(data["signature"]),
            neighbor_links=[int(x) for x in data["links"]],
            member_images=[int(x) for x in data["members"]],
            created_at=int(data["created_at"]),
            words=[_word_from_dict(word) for word in data["words"]],
        )


def _encode(payload: Dict[str, Any]) -> bytes:
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


class LongTermStore:
    """
    Persistent long-term memory with an asynchronous writer.

    Writes are queued on a bounded queue (``persist`` blocks only when it is
    full) and applied by one background thread. All public methods are
    thread-safe.

    Example:
        >>> with LongTermStore("ltm.db") as store:
        ...     store.persist(record)
        ...     assert store.fetch(record.location_id) == record
    """

    def __init__(self, path: PathLike, queue_size: int = constants.LTM_QUEUE_SIZE, fsync: bool = False):
        """
        Open (or create) the database and start the writer thread.

        Args:
            path: Database file
            queue_size: Capacity of the write queue
            fsync: Call ``os.fsync`` after every frame

        Raises:
            StoreIOError: If the file cannot be opened or has a bad header
        """
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.RLock()
        self._read_lock = threading.Lock()
        self._index: Dict[int, int] = {}
        self._word_index: Dict[int, int] = {}
        self._location_words: Dict[int, Set[int]] = {}
        self._word_refs: Dict[int, Set[int]] = {}
        self._pending: Dict[int, Tuple[int, StoredLocation]] = {}
        self._pending_words: Dict[int, Tuple[int, VisualWord]] = {}
        self._pending_rewrites: List[Tuple[int, Dict[int, int]]] = []
        self._tickets = itertools.count(1)
        self._queue: "queue.Queue[Optional[Tuple[str, int, Any]]]" = queue.Queue(maxsize=queue_size)
        self._writer_error: Optional[BaseException] = None
        self._closed = False
        self.frames_written = 0

        self._open()
        self._writer = threading.Thread(target=self._run_writer, name="loopguard-ltm-writer", daemon=True)
        self._writer.start()
        logger.info(f"Long-term memory opened at {self.path}: {len(self._index)} locations")

    # ------------------------------------------------------------------ open

    def _open(self) -> None:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                with open(self.path, "wb") as f:
                    f.write(_FILE_HEADER.pack(constants.LTM_MAGIC, constants.LTM_VERSION))
            else:
                self._replay()
            self._append = open(self.path, "ab")
            self._reader = open(self.path, "rb")
        except OSError as e:
            raise StoreIOError(f"Cannot open long-term memory: {e}", path=str(self.path))

    def _replay(self) -> None:
        with open(self.path, "rb") as f:
            data = f.read()
        if len(data) < _FILE_HEADER.size:
            raise StoreIOError("Long-term memory file too short for its header", path=str(self.path))
        magic, version = _FILE_HEADER.unpack_from(data, 0)
        if magic != constants.LTM_MAGIC:
            raise StoreIOError(f"Bad long-term memory magic {magic!r}", path=str(self.path))
        if version != constants.LTM_VERSION:
            raise StoreIOError(f"Unsupported long-term memory version {version}", path=str(self.path))

        offset = _FILE_HEADER.size
        while offset < len(data):
            if offset + _FRAME_HEADER.size > len(data):
                break
            kind, length = _FRAME_HEADER.unpack_from(data, offset)
            end = offset + _FRAME_HEADER.size + length
            if end > len(data):
                break
            try:
                payload = json.loads(data[offset + _FRAME_HEADER.size:end].decode("utf-8"))
            except ValueError:
                break
            self._apply_frame(kind, payload, offset)
            offset = end

        if offset < len(data):
            logger.warning(f"Dropping {len(data) - offset} bytes of a truncated frame at offset {offset}")
            with open(self.path, "r+b") as f:
                f.truncate(offset)

    def _apply_frame(self, kind: int, payload: Dict[str, Any], offset: int) -> None:
        if kind in (FRAME_LOCATION, FRAME_BATCH):
            records = [payload["location"]] if kind == FRAME_LOCATION else payload["locations"]
            for data in records:
                record = StoredLocation.from_dict(data)
                self._register(record)
                self._index[record.location_id] = offset
                for word in record.words:
                    self._word_index[word.word_id] = offset
        elif kind == FRAME_DISCARD:
            for location_id in payload["ids"]:
                self._index.pop(location_id, None)
                self._unregister(location_id)
        elif kind == FRAME_WORDS:
            for data in payload["words"]:
                self._word_index[int(data["id"])] = offset
        else:
            raise StoreIOError(f"Unknown frame kind {kind} at offset {offset}", path=str(self.path))

    # ------------------------------------------------------ word references

    def _register(self, record: StoredLocation) -> None:
        self._unregister(record.location_id)
        words = set(record.signature)
        self._location_words[record.location_id] = words
        for word_id in words:
            self._word_refs.setdefault(word_id, set()).add(record.location_id)

    def _unregister(self, location_id: int) -> None:
        for word_id in self._location_words.pop(location_id, ()):
            refs = self._word_refs.get(word_id)
            if refs is not None:
                refs.discard(location_id)
                if not refs:
                    del self._word_refs[word_id]

    def references_word(self, word_id: int) -> bool:
        """True if a stored location's signature holds ``word_id``."""
        with self._lock:
            return bool(self._word_refs.get(word_id))

    # --------------------------------------------------------------- public

    def _check_usable(self) -> None:
        if self._closed:
            raise StoreError("Long-term memory is closed")
        if self._writer_error is not None:
            raise StoreIOError(f"Background writer failed: {self._writer_error}", path=str(self.path))

    def __len__(self) -> int:
        with self._lock:
            return len(self._index.keys() | self._pending.keys())

    def __contains__(self, location_id: object) -> bool:
        with self._lock:
            return location_id in self._pending or location_id in self._index

    def ids(self) -> List[int]:
        """Ids of the stored locations, sorted."""
        with self._lock:
            return sorted(self._index.keys() | self._pending.keys())

    def persist(self, record: StoredLocation) -> int:
        """
        Queue a location for writing.

        The record is visible to :meth:`fetch` as soon as this returns.
        Blocks only while the write queue is full.

        Args:
            record: Location detached from working memory and the dictionary

        Returns:
            Ticket number of the write
        """
        self._check_usable()
        ticket = next(self._tickets)
        with self._lock:
            self._pending[record.location_id] = (ticket, record)
            for word in record.words:
                self._pending_words[word.word_id] = (ticket, word)
            self._register(record)
        self._queue.put(("put", ticket, record))
        logger.debug(f"Queued location {record.location_id} (ticket {ticket}, {len(record.words)} words)")
        return ticket

    def keep_words(self, words: Iterable[VisualWord]) -> int:
        """
        Keep evicted words that stored locations still reference.

        Words no stored location references are ignored.

        Returns:
            Number of words kept
        """
        self._check_usable()
        with self._lock:
            kept = [word.detached() for word in words if self._word_refs.get(word.word_id)]
            if not kept:
                return 0
            ticket = next(self._tickets)
            for word in kept:
                self._pending_words[word.word_id] = (ticket, word)
        self._queue.put(("words", ticket, kept))
        return len(kept)

    def discard(self, location_id: int) -> bool:
        """
        Remove a location, as done when it is retrieved into working memory.

        Returns:
            True if the location was stored
        """
        self._check_usable()
        with self._lock:
            if location_id not in self._pending and location_id not in self._index:
                return False
            self._pending.pop(location_id, None)
            self._index.pop(location_id, None)
            self._unregister(location_id)
            ticket = next(self._tickets)
        self._queue.put(("discard", ticket, location_id))
        return True

    def fetch(self, location_id: int) -> Optional[StoredLocation]:
        """
        Read a stored location, including queued but unwritten ones.

        Args:
            location_id: Location id

        Returns:
            The record, or None if it is not stored

        Raises:
            StoreIOError: If the record cannot be read
        """
        self._check_usable()
        with self._lock:
            pending = self._pending.get(location_id)
            offset = self._index.get(location_id)
            rewrites = [mapping for _, mapping in self._pending_rewrites]
        if pending is not None:
            record = pending[1]
        elif offset is not None:
            record = self._read_location(offset, location_id)
        else:
            return None
        for mapping in rewrites:
            record = record.remapped(mapping)
        return record

    def fetch_words(self, word_ids: Iterable[int]) -> Dict[int, VisualWord]:
        """
        Read stored word descriptors.

        Args:
            word_ids: Words to look up

        Returns:
            Mapping word id -> word for the ids found

        Raises:
            StoreIOError: If a frame cannot be read
        """
        self._check_usable()
        found: Dict[int, VisualWord] = {}
        frames: Dict[int, Dict[int, VisualWord]] = {}
        for word_id in word_ids:
            with self._lock:
                pending = self._pending_words.get(word_id)
                offset = self._word_index.get(word_id)
            if pending is not None:
                found[word_id] = pending[1]
                continue
            if offset is None:
                continue
            if offset not in frames:
                frames[offset] = self._read_words(offset)
            if word_id in frames[offset]:
                found[word_id] = frames[offset][word_id]
        return found

    def rewrite_word_refs(self, mapping: Mapping[int, int]) -> int:
        """
        Replace old word ids in every stored signature.

        The change is visible to readers at once and written to disk as a
        single frame, so a crash never leaves it half applied.

        Args:
            mapping: Old word id -> new word id

        Returns:
            Number of stored locations touched
        """
        self._check_usable()
        changes = {int(old): int(new) for old, new in mapping.items() if old != new}
        if not changes:
            return 0
        with self._lock:
            touched: Set[int] = set()
            for old in changes:
                touched |= self._word_refs.get(old, set())
            for location_id in touched:
                pending = self._pending.get(location_id)
                if pending is not None:
                    ticket, record = pending
                    self._pending[location_id] = (ticket, record.remapped(changes))
                words = {changes.get(word_id, word_id) for word_id in self._location_words.get(location_id, ())}
                self._unregister(location_id)
                self._location_words[location_id] = words
                for word_id in words:
                    self._word_refs.setdefault(word_id, set()).add(location_id)
            ticket = next(self._tickets)
            self._pending_rewrites.append((ticket, changes))
        self._queue.put(("rewrite", ticket, (changes, sorted(touched))))
        logger.debug(f"Rewrote {len(changes)} word ids in {len(touched)} stored locations")
        return len(touched)

    def flush(self, timeout: Optional[float] = None) -> None:
        """
        Wait until every queued write is on disk.

        Raises:
            StoreError: If the database is closed
            StoreIOError: If the writer failed
        """
        if self._closed:
            raise StoreError("Long-term memory is closed")
        if timeout is None:
            self._queue.join()
        else:
            done = threading.Event()
            waiter = threading.Thread(target=lambda: (self._queue.join(), done.set()), daemon=True)
            waiter.start()
            if not done.wait(timeout):
                raise StoreIOError(f"Flush did not finish within {timeout}s", path=str(self.path))
        if self._writer_error is not None:
            raise StoreIOError(f"Background writer failed: {self._writer_error}", path=str(self.path))

    def close(self) -> None:
        """Flush pending writes, stop the writer and close the file."""
        if self._closed:
            return
        self._queue.put(None)
        self._writer.join()
        self._closed = True
        self._append.close()
        self._reader.close()
        logger.info(f"Long-term memory closed at {self.path}: {len(self._index)} locations")

    def __enter__(self) -> "LongTermStore":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def get_stats(self) -> dict:
        """
        Get database statistics.

        Returns:
            Dictionary with record and queue counts
        """
        with self._lock:
            return {
                "path": str(self.path),
                "locations": len(self._index.keys() | self._pending.keys()),
                "pending_writes": len(self._pending),
                "pending_rewrites": len(self._pending_rewrites),
                "queued_jobs": self._queue.qsize(),
                "frames_written": self.frames_written,
                "words_indexed": len(self._word_index),
            }

    # ------------------------------------------------------------ disk I/O

    def _write_frame(self, kind: int, payload: bytes) -> int:
        offset = self._append.tell()
        self._append.write(_FRAME_HEADER.pack(kind, len(payload)))
        self._append.write(payload)
        self._append.flush()
        if self.fsync:
            os.fsync(self._append.fileno())
        self.frames_written += 1
        return offset

    def _read_frame(self, offset: int) -> Tuple[int, Dict[str, Any]]:
        try:
            with self._read_lock:
                self._reader.seek(offset)
                header = self._reader.read(_FRAME_HEADER.size)
                kind, length = _FRAME_HEADER.unpack(header)
                body = self._reader.read(length)
            if len(body) != length:
                raise StoreIOError(f"Short read at offset {offset}", path=str(self.path))
            return kind, json.loads(body.decode("utf-8"))
        except (OSError, ValueError, struct.error) as e:
            raise StoreIOError(f"Cannot read frame at offset {offset}: {e}", path=str(self.path))

    def _read_location(self, offset: int, location_id: int) -> StoredLocation:
        kind, payload = self._read_frame(offset)
        if kind == FRAME_LOCATION:
            records = [payload["location"]]
        elif kind == FRAME_BATCH:
            records = payload["locations"]
        else:
            raise StoreIOError(f"Frame at offset {offset} holds no location", path=str(self.path))
        for data in records:
            if int(data["id"]) == location_id:
                return StoredLocation.from_dict(data)
        raise StoreIOError(f"Location {location_id} missing from frame at offset {offset}", path=str(self.path))

    def _read_words(self, offset: int) -> Dict[int, VisualWord]:
        kind, payload = self._read_frame(offset)
        if kind == FRAME_WORDS:
            entries = payload["words"]
        elif kind == FRAME_LOCATION:
            entries = payload["location"]["words"]
        elif kind == FRAME_BATCH:
            entries = [word for data in payload["locations"] for word in data["words"]]
        else:
            entries = []
        words = (_word_from_dict(data) for data in entries)
        return {word.word_id: word for word in words}

    # --------------------------------------------------------------- writer

    def _run_writer(self) -> None:
        while True:
            job = self._queue.get()
            try:
                if job is None:
                    return
                action, ticket, body = job
                if action == "put":
                    self._write_put(ticket, body)
                elif action == "words":
                    self._write_words(ticket, body)
                elif action == "discard":
                    self._write_frame(FRAME_DISCARD, _encode({"ids": [body]}))
                elif action == "rewrite":
                    self._write_rewrite(ticket, *body)
            except Exception as e:
                logger.error(f"Long-term memory writer failed: {e}")
                self._writer_error = e
            finally:
                self._queue.task_done()

    def _write_put(self, ticket: int, record: StoredLocation) -> None:
        offset = self._write_frame(FRAME_LOCATION, _encode({"location": record.to_dict()}))
        with self._lock:
            current = self._pending.get(record.location_id)
            if current is not None and current[0] == ticket:
                del self._pending[record.location_id]
                self._index[record.location_id] = offset
            for word in record.words:
                self._word_index[word.word_id] = offset
                if self._pending_words.get(word.word_id, (None,))[0] == ticket:
                    del self._pending_words[word.word_id]

    def _write_words(self, ticket: int, words: List[VisualWord]) -> None:
        offset = self._write_frame(FRAME_WORDS, _encode({"words": [_word_to_dict(word) for word in words]}))
        with self._lock:
            for word in words:
                self._word_index[word.word_id] = offset
                if self._pending_words.get(word.word_id, (None,))[0] == ticket:
                    del self._pending_words[word.word_id]

    def _write_rewrite(self, ticket: int, changes: Dict[int, int], touched: List[int]) -> None:
        originals: Dict[int, int] = {}
        records = []
        for location_id in touched:
            with self._lock:
                offset = self._index.get(location_id)
            if offset is None:
                continue
            records.append(self._read_location(offset, location_id).remapped(changes))
            originals[location_id] = offset
        if records:
            offset = self._write_frame(FRAME_BATCH, _encode({"locations": [r.to_dict() for r in records]}))
        with self._lock:
            for record in records:
                location_id = record.location_id
                if self._index.get(location_id) == originals[location_id]:
                    self._index[location_id] = offset
                    for word in record.words:
                        self._word_index[word.word_id] = offset
            self._pending_rewrites = [(t, m) for t, m in self._pending_rewrites if t != ticket]
