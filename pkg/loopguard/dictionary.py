"""
Incremental visual vocabulary.

Descriptors are quantized to visual words with a nearest-neighbor distance
ratio test against the resident words. Every word keeps reference counts
per location so words nobody references can leave the dictionary with the
locations transferred to long-term memory.
"""

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple
import logging

import numpy as np
from scipy.spatial import cKDTree

from loopguard import constants
from loopguard.exceptions import ConsistencyError, DimensionMismatchError
from loopguard.ingest import DescriptorSet

logger = logging.getLogger(__name__)


class Signature(Counter):
    """
    Bag-of-words signature: a multiset of visual word ids.

    Multiplicities matter, several descriptors of one image may map to the same word.
    """

    @property
    def size(self) -> int:
        """Total number of words, counting multiplicity."""
        return sum(self.values())

    def remapped(self, mapping: Mapping[int, int]) -> "Signature":
        """Copy with word ids replaced through ``mapping`` (ids not in it are kept)."""
        result = Signature()
        for word_id, count in self.items():
            result[mapping.get(word_id, word_id)] += count
        return result

    def to_pairs(self) -> List[List[int]]:
        """``[[word_id, multiplicity], ...]`` sorted by word id."""
        return [[int(word_id), int(count)] for word_id, count in sorted(self.items())]

    @classmethod
    def from_pairs(cls, pairs: Iterable[Iterable[int]]) -> "Signature":
        signature = cls()
        for word_id, count in pairs:
            signature[int(word_id)] += int(count)
        return signature


@dataclass(eq=False)
class VisualWord:
    """
    A quantization cell represented by one descriptor.

    Attributes:
        word_id: Unique id, never reused within a run
        descriptor: Representative descriptor (immutable)
        refs: Location id -> number of times the location's signature holds this word
    """

    word_id: int
    descriptor: np.ndarray
    refs: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)

    @property
    def ref_count(self) -> int:
        return sum(self.refs.values())

    def detached(self) -> "VisualWord":
        """Copy without references, as persisted in long-term memory."""
        return VisualWord(self.word_id, self.descriptor.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VisualWord):
            return NotImplemented
        return (
            self.word_id == other.word_id
            and self.refs == other.refs
            and np.array_equal(self.descriptor, other.descriptor)
        )

    def __repr__(self) -> str:
        return f"VisualWord(word_id={self.word_id}, refs={dict(self.refs)})"


class WordIndex:
    """
    Nearest-neighbor index over resident word descriptors.

    The index is a snapshot taken at the last :meth:`rebuild` plus words
    added since (scanned exactly) minus words removed since (filtered out of
    results). Snapshots under ``exact_limit`` words are scanned with numpy;
    larger ones are searched with a k-d tree.
    """

    def __init__(
        self,
        exact_limit: int = constants.EXACT_SCAN_LIMIT,
        leafsize: int = constants.DEFAULT_KDTREE_LEAFSIZE,
        eps: float = 0.0,
    ):
        """
        Initialize an empty index.

        Args:
            exact_limit: Snapshot size from which a k-d tree is used
            leafsize: k-d tree leaf size
            eps: k-d tree approximation factor (0 is exact)
        """
        self.exact_limit = exact_limit
        self.leafsize = leafsize
        self.eps = eps
        self._ids = np.empty(0, dtype=np.int64)
        self._data = np.empty((0, 0), dtype=np.float64)
        self._sq_norms = np.empty(0, dtype=np.float64)
        self._positions: Dict[int, int] = {}
        self._tree: Optional[cKDTree] = None
        self._pending: Dict[int, np.ndarray] = {}
        self._removed: Set[int] = set()

    def __len__(self) -> int:
        return len(self._positions) - len(self._removed) + len(self._pending)

    def __contains__(self, word_id: object) -> bool:
        if word_id in self._pending:
            return True
        return word_id in self._positions and word_id not in self._removed

    def ids(self) -> Set[int]:
        """Ids of the words the index answers for."""
        return (set(self._positions) - self._removed) | set(self._pending)

    @property
    def dirty(self) -> bool:
        """True if words were added or removed since the last rebuild."""
        return bool(self._pending or self._removed)

    @property
    def uses_tree(self) -> bool:
        return self._tree is not None

    def rebuild(self, words: Mapping[int, VisualWord]) -> None:
        """Snapshot ``words`` and drop the pending and removed sets."""
        ids = sorted(words)
        self._ids = np.asarray(ids, dtype=np.int64)
        if ids:
            self._data = np.stack([words[i].descriptor for i in ids]).astype(np.float64)
        else:
            self._data = np.empty((0, 0), dtype=np.float64)
        self._sq_norms = np.einsum("ij,ij->i", self._data, self._data) if ids else np.empty(0)
        self._positions = {word_id: row for row, word_id in enumerate(ids)}
        self._tree = cKDTree(self._data, leafsize=self.leafsize) if len(ids) >= self.exact_limit else None
        self._pending.clear()
        self._removed.clear()

    def add(self, word_id: int, descriptor: np.ndarray) -> None:
        self._removed.discard(word_id)
        if word_id not in self._positions:
            self._pending[word_id] = np.asarray(descriptor, dtype=np.float64)

    def remove(self, word_id: int) -> None:
        if self._pending.pop(word_id, None) is None and word_id in self._positions:
            self._removed.add(word_id)

    def query(self, descriptors: np.ndarray, k: int = 2) -> Tuple[np.ndarray, np.ndarray]:
        """
        Find the ``k`` nearest resident words of every descriptor.

        Args:
            descriptors: ``(n, D)`` query array
            k: Number of neighbors

        Returns:
            ``(ids, distances)``, both ``(n, k)``, sorted by distance; missing
            neighbors have id ``-1`` and distance ``inf``
        """
        queries = np.asarray(descriptors, dtype=np.float64)
        n = queries.shape[0]
        candidate_ids = [np.full((n, k), -1, dtype=np.int64)]
        candidate_dists = [np.full((n, k), np.inf)]

        if len(self._positions):
            ids, dists = self._query_snapshot(queries, k)
            candidate_ids.append(ids)
            candidate_dists.append(dists)
        if self._pending:
            pending_ids = np.fromiter(self._pending, dtype=np.int64, count=len(self._pending))
            pending_data = np.stack(list(self._pending.values()))
            dists = np.sqrt(((queries[:, None, :] - pending_data[None, :, :]) ** 2).sum(axis=2))
            candidate_ids.append(np.broadcast_to(pending_ids, dists.shape))
            candidate_dists.append(dists)

        all_ids = np.concatenate(candidate_ids, axis=1)
        all_dists = np.concatenate(candidate_dists, axis=1)
        order = np.argsort(all_dists, axis=1, kind="stable")[:, :k]
        return np.take_along_axis(all_ids, order, axis=1), np.take_along_axis(all_dists, order, axis=1)

    def _query_snapshot(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        size = len(self._positions)
        wanted = min(k + len(self._removed), size)
        if self._tree is not None:
            dists, rows = self._tree.query(queries, k=wanted, eps=self.eps)
            dists = np.asarray(dists, dtype=np.float64).reshape(len(queries), wanted)
            rows = np.asarray(rows).reshape(len(queries), wanted)
            missing = rows >= size
            rows = np.where(missing, 0, rows)
            ids = np.where(missing, -1, self._ids[rows])
            dists = np.where(missing, np.inf, dists)
        else:
            sq = (
                np.einsum("ij,ij->i", queries, queries)[:, None]
                + self._sq_norms[None, :]
                - 2.0 * queries @ self._data.T
            )
            if wanted < size:
                rows = np.argpartition(sq, wanted - 1, axis=1)[:, :wanted]
            else:
                rows = np.broadcast_to(np.arange(size), (len(queries), size))
            ids = self._ids[rows]
            # exact distances for the shortlisted rows
            dists = np.linalg.norm(queries[:, None, :] - self._data[rows], axis=2)
        if self._removed:
            dead = np.isin(ids, np.fromiter(self._removed, dtype=np.int64, count=len(self._removed)))
            ids = np.where(dead, -1, ids)
            dists = np.where(dead, np.inf, dists)
        return ids, dists


class Dictionary:
    """
    Visual dictionary holding only the words of STM and WM locations.

    Example:
        >>> dictionary = Dictionary(match_ratio=0.8)
        >>> signature = dictionary.quantize(frame, location_id=0)
    """

    def __init__(
        self,
        match_ratio: float = constants.DEFAULT_MATCH_RATIO,
        dim: Optional[int] = None,
        exact_limit: int = constants.EXACT_SCAN_LIMIT,
        leafsize: int = constants.DEFAULT_KDTREE_LEAFSIZE,
        eps: float = 0.0,
    ):
        """
        Initialize an empty dictionary.

        Args:
            match_ratio: Nearest/second-nearest distance ratio below which a
                descriptor matches its nearest word
            dim: Descriptor dimension, learned from the first descriptor if None
            exact_limit: Index snapshot size from which a k-d tree is used
            leafsize: k-d tree leaf size
            eps: k-d tree approximation factor
        """
        self.match_ratio = match_ratio
        self.dim = dim
        self.words: Dict[int, VisualWord] = {}
        self.index = WordIndex(exact_limit=exact_limit, leafsize=leafsize, eps=eps)
        self._next_id = 0
        self._iteration_added: Set[int] = set()
        self.rebuilds = 0
        logger.debug(f"Dictionary initialized: match_ratio={match_ratio}")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word_id: object) -> bool:
        return word_id in self.words

    def get(self, word_id: int) -> Optional[VisualWord]:
        return self.words.get(word_id)

    @property
    def next_word_id(self) -> int:
        return self._next_id

    @property
    def words_added(self) -> int:
        """Words created or reinserted since :meth:`begin_iteration` that are still resident."""
        return len(self._iteration_added)

    def begin_iteration(self) -> None:
        self._iteration_added.clear()

    def _check_dim(self, dim: int) -> None:
        if self.dim is None:
            self.dim = dim
        elif dim != self.dim:
            raise DimensionMismatchError(self.dim, dim)

    def _is_match(self, nearest: int, d1: float, d2: float) -> bool:
        if nearest < 0:
            return False
        if d1 == 0.0:
            return True
        return bool(np.isfinite(d2) and d2 > 0 and d1 / d2 < self.match_ratio)

    def _insert(self, word_id: int, descriptor: np.ndarray) -> VisualWord:
        word = VisualWord(word_id, descriptor)
        self.words[word_id] = word
        self.index.add(word_id, word.descriptor)
        self._iteration_added.add(word_id)
        return word

    def quantize(self, ds: DescriptorSet, location_id: int) -> Signature:
        """
        Quantize an image's descriptors into a signature for ``location_id``.

        Each descriptor is compared with the words resident before this image.
        If the nearest/second-nearest distance ratio is below ``match_ratio``
        (or the nearest distance is zero) the descriptor maps to the nearest
        word, otherwise it becomes a new word. References are added for
        ``location_id``.

        Args:
            ds: Descriptors of one image
            location_id: Fresh location id

        Returns:
            Multiset of word ids, one entry per descriptor

        Raises:
            DimensionMismatchError: If the descriptors do not match the dictionary's dimension
        """
        signature = Signature()
        if len(ds) == 0:
            return signature
        self._check_dim(ds.descriptors.shape[1])

        ids, dists = self.index.query(ds.descriptors, k=2)
        created = 0
        for row in range(len(ds)):
            nearest = int(ids[row, 0])
            if self._is_match(nearest, dists[row, 0], dists[row, 1]):
                signature[nearest] += 1
            else:
                word = self._insert(self._next_id, ds.descriptors[row])
                self._next_id += 1
                signature[word.word_id] += 1
                created += 1

        self.add_location_refs(location_id, signature)
        logger.debug(f"Quantized image {ds.image_id}: {len(ds)} descriptors, {created} new words")
        return signature

    def add_location_refs(self, location_id: int, signature: Mapping[int, int]) -> None:
        """
        Add references from ``location_id`` to the words of ``signature``.

        Raises:
            ConsistencyError: If a word is not resident
        """
        for word_id, count in signature.items():
            word = self.words.get(word_id)
            if word is None:
                raise ConsistencyError(
                    f"Location {location_id} references word {word_id} which is not resident",
                    invariant="reference-bijection",
                    location_id=location_id,
                    word_id=word_id,
                )
            word.refs[location_id] += count

    def move_location_refs(self, source: int, target: int, signature: Mapping[int, int]) -> None:
        """
        Re-point the references of ``signature`` from ``source`` to ``target``.

        Raises:
            ConsistencyError: If ``source`` does not hold the references
        """
        for word_id, count in signature.items():
            word = self.words.get(word_id)
            if word is None or word.refs[source] < count:
                raise ConsistencyError(
                    f"Word {word_id} does not hold {count} references from location {source}",
                    invariant="reference-bijection",
                    location_id=source,
                    word_id=word_id,
                )
            word.refs[source] -= count
            if word.refs[source] == 0:
                del word.refs[source]
            word.refs[target] += count

    def remove_location_refs(self, location_id: int, signature: Mapping[int, int]) -> List[VisualWord]:
        """
        Remove the references of a location and evict words left without any.

        Args:
            location_id: Location leaving the dictionary's scope
            signature: Its signature

        Returns:
            Evicted (orphaned) words sorted by id

        Raises:
            ConsistencyError: If a word does not hold the expected reference
        """
        orphans = []
        for word_id, count in signature.items():
            word = self.words.get(word_id)
            if word is None or word.refs[location_id] < count:
                raise ConsistencyError(
                    f"Word {word_id} does not hold {count} references from location {location_id}",
                    invariant="reference-bijection",
                    location_id=location_id,
                    word_id=word_id,
                )
            word.refs[location_id] -= count
            if word.refs[location_id] == 0:
                del word.refs[location_id]
            if not word.refs:
                del self.words[word_id]
                self.index.remove(word_id)
                self._iteration_added.discard(word_id)
                orphans.append(word)
        orphans.sort(key=lambda w: w.word_id)
        return orphans

    def reconcile_words(self, old_words: Iterable[VisualWord]) -> Dict[int, int]:
        """
        Bring words of retrieved locations back in line with the dictionary.

        A word still resident maps to itself. Otherwise it is matched against
        the words resident before this call with the distance ratio test: a
        match maps it to the resident word and the old word is dropped for
        good; no match reinserts it under its original id.

        Args:
            old_words: Words carried by retrieved long-term memory records

        Returns:
            Mapping old word id -> resident word id
        """
        mapping: Dict[int, int] = {}
        absent: Dict[int, VisualWord] = {}
        for word in old_words:
            if word.word_id in self.words:
                mapping[word.word_id] = word.word_id
            else:
                absent.setdefault(word.word_id, word)

        reinserted = 0
        if absent:
            candidates = list(absent.values())
            self._check_dim(candidates[0].descriptor.shape[0])
            ids, dists = self.index.query(np.stack([word.descriptor for word in candidates]), k=2)
            for row, word in enumerate(candidates):
                nearest = int(ids[row, 0])
                if self._is_match(nearest, dists[row, 0], dists[row, 1]):
                    mapping[word.word_id] = nearest
                else:
                    self._insert(word.word_id, word.descriptor)
                    mapping[word.word_id] = word.word_id
                    reinserted += 1
        logger.debug(f"Reconciled {len(mapping)} words, {reinserted} reinserted")
        return mapping

    def rebuild_index(self) -> None:
        """Rebuild the nearest-neighbor index from the resident words."""
        self.index.rebuild(self.words)
        self.rebuilds += 1
        logger.debug(f"Dictionary index rebuilt over {len(self.words)} words (tree={self.index.uses_tree})")

    def ref_count(self, word_id: int) -> int:
        word = self.words.get(word_id)
        return word.ref_count if word else 0

    def reference_multiset(self) -> Counter:
        """``(word_id, location_id) -> multiplicity`` over every resident word."""
        refs: Counter = Counter()
        for word in self.words.values():
            for location_id, count in word.refs.items():
                refs[(word.word_id, location_id)] += count
        return refs

    def get_stats(self) -> dict:
        """
        Get dictionary statistics.

        Returns:
            Dictionary with size and index statistics
        """
        return {
            "words": len(self.words),
            "dim": self.dim,
            "next_word_id": self._next_id,
            "words_added": self.words_added,
            "index_uses_tree": self.index.uses_tree,
            "rebuilds": self.rebuilds,
        }
