"""
Location graph and the three memory tiers.

New locations enter short-term memory (STM), the oldest STM location moves to
working memory (WM) where it can be hypothesised as a loop closure, and WM
locations are transferred to long-term memory (LTM) when the time budget is
exceeded. Locations neighbouring the best hypothesis come back from LTM by
retrieval.
"""

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Set, Tuple
import logging

from loopguard import constants
from loopguard.dictionary import Dictionary, Signature, VisualWord
from loopguard.enums import Tier
from loopguard.exceptions import ConsistencyError, ContractError, StoreIOError
from loopguard.store import LongTermStore, StoredLocation

logger = logging.getLogger(__name__)

__all__ = [
    "Location",
    "Memory",
    "MergeRecord",
    "Signature",
    "neighborhood",
    "similarity",
]

Graph = Dict[int, Set[int]]


def similarity(za: Signature, zb: Signature) -> float:
    """
    Fraction of matched word pairs between two signatures.

    The number of pairs is the multiset intersection size, divided by the
    size of the larger signature.

    Args:
        za: First signature
        zb: Second signature

    Returns:
        Similarity in [0, 1]; 0 when either signature is empty

    Example:
        >>> similarity(Signature({1: 2, 2: 1}), Signature({1: 1, 3: 1}))
        0.3333333333333333
    """
    size_a = sum(za.values())
    size_b = sum(zb.values())
    if size_a == 0 or size_b == 0:
        return 0.0
    if len(za) > len(zb):
        za, zb = zb, za
    pairs = sum(min(count, zb.get(word_id, 0)) for word_id, count in za.items())
    return pairs / max(size_a, size_b)


def neighborhood(graph: Graph, origin: int, radius: int) -> Dict[int, int]:
    """
    Breadth-first graph distances from ``origin`` up to ``radius`` links.

    Returns:
        Mapping location id -> distance, including ``origin`` at 0
    """
    distances = {origin: 0}
    if origin not in graph:
        return distances
    frontier = [origin]
    for depth in range(1, radius + 1):
        next_frontier = []
        for node in frontier:
            for neighbor in sorted(graph.get(node, ())):
                if neighbor not in distances:
                    distances[neighbor] = depth
                    next_frontier.append(neighbor)
        if not next_frontier:
            break
        frontier = next_frontier
    return distances


@dataclass(eq=False)
class Location:
    """
    A node of the topological graph.

    Attributes:
        location_id: Creation-order id
        signature: Bag-of-words signature
        weight: Merges absorbed, each adding the absorbed weight plus one
        links: Neighbour ids (the graph's own adjacency set)
        member_images: Images merged into this location
        created_at: Iteration that created it
    """

    location_id: int
    signature: Signature
    weight: int = 0
    links: Set[int] = field(default_factory=set)
    member_images: List[int] = field(default_factory=list)
    created_at: int = 0

    def __repr__(self) -> str:
        return (
            f"Location(id={self.location_id}, weight={self.weight}, "
            f"words={self.signature.size}, links={sorted(self.links)})"
        )


@dataclass(frozen=True)
class MergeRecord:
    """One weight transfer: ``into`` absorbed ``absorbed`` (kind is 'rehearsal' or 'loop')."""

    kind: str
    into: int
    absorbed: int


class Memory:
    """
    STM, WM and the handle on LTM, with the graph spanning all three.

    Only the pipeline thread mutates a Memory. Transfers hand records to the
    store, whose writer thread does the disk work.

    Example:
        >>> memory = Memory(Dictionary(), store)
        >>> location = memory.add_location(memory.allocate_id(), signature, image_id=0)
        >>> memory.rehearse(location)
    """

    def __init__(
        self,
        dictionary: Dictionary,
        store: LongTermStore,
        stm_size: int = constants.DEFAULT_STM_SIZE,
        rehearsal_threshold: float = constants.DEFAULT_REHEARSAL_THRESHOLD,
        neighbor_radius: int = constants.DEFAULT_NEIGHBOR_RADIUS,
        max_retrieved: int = constants.DEFAULT_MAX_RETRIEVED,
    ):
        self.dictionary = dictionary
        self.store = store
        self.stm_size = stm_size
        self.rehearsal_threshold = rehearsal_threshold
        self.neighbor_radius = neighbor_radius
        self.max_retrieved = max_retrieved

        self.locations: Dict[int, Location] = {}
        self.stm: Deque[int] = deque()
        self.wm: Set[int] = set()
        self.graph: Graph = {}
        self.retrieved_this_iteration: Set[int] = set()
        self.transferred_this_iteration: Set[int] = set()
        self.merged_pending: Set[int] = set()
        self.merge_log: List[MergeRecord] = []

        self.created = 0
        self.deleted = 0
        self.total_transferred = 0
        self.total_retrieved = 0
        self._next_id = 0
        self._last_created: Optional[int] = None

    # ---------------------------------------------------------------- tiers

    def tier_of(self, location_id: int) -> Optional[Tier]:
        if location_id in self.wm:
            return Tier.WM
        if location_id in self.locations:
            return Tier.STM
        if location_id in self.store:
            return Tier.LTM
        return None

    @property
    def wm_size(self) -> int:
        return len(self.wm)

    @property
    def stm_len(self) -> int:
        return len(self.stm)

    def wm_states(self) -> List[int]:
        """WM location ids in ascending order."""
        return sorted(self.wm)

    def begin_iteration(self) -> None:
        self.retrieved_this_iteration.clear()
        self.transferred_this_iteration.clear()

    def allocate_id(self) -> int:
        location_id = self._next_id
        self._next_id += 1
        return location_id

    def add_location(self, location_id: int, signature: Signature, image_id: int, iteration: int = 0) -> Location:
        """
        Create a location for a quantized image and link it to the previous one.

        The signature's dictionary references must already exist (they are
        added by :meth:`Dictionary.quantize`). The location belongs to no
        tier until :meth:`insert_stm`.
        """
        links = self.graph.setdefault(location_id, set())
        location = Location(
            location_id=location_id,
            signature=signature,
            links=links,
            member_images=[image_id],
            created_at=iteration,
        )
        self.locations[location_id] = location
        self.created += 1
        previous = self._last_created
        if previous is not None and previous in self.graph:
            self._link(location_id, previous)
        self._last_created = location_id
        return location

    def _link(self, a: int, b: int) -> None:
        if a == b:
            return
        self.graph.setdefault(a, set()).add(b)
        self.graph.setdefault(b, set()).add(a)

    def _unlink_all(self, location_id: int) -> Set[int]:
        neighbors = self.graph.pop(location_id, set())
        for neighbor in neighbors:
            self.graph.get(neighbor, set()).discard(location_id)
        return neighbors

    # ------------------------------------------------------------ rehearsal

    def rehearse(self, lt: Location) -> Optional[int]:
        """
        Merge ``lt`` with the most recent similar STM location.

        STM is scanned from the most recent location. The first one with
        similarity at least the rehearsal threshold is absorbed: its
        signature replaces ``lt``'s, its weight plus one is added to
        ``lt``'s, its links move to ``lt`` and it is deleted.

        Returns:
            Id of the absorbed location, or None
        """
        for candidate_id in reversed(self.stm):
            candidate = self.locations[candidate_id]
            if similarity(lt.signature, candidate.signature) < self.rehearsal_threshold:
                continue

            discarded = self.dictionary.remove_location_refs(lt.location_id, lt.signature)
            if discarded:
                self.store.keep_words(discarded)
            self.dictionary.move_location_refs(candidate_id, lt.location_id, candidate.signature)
            lt.signature = Signature(candidate.signature)
            lt.weight += candidate.weight + 1
            lt.member_images = sorted(set(candidate.member_images) | set(lt.member_images))
            self.merge_log.append(MergeRecord("rehearsal", lt.location_id, candidate_id))

            for neighbor in self._unlink_all(candidate_id):
                self._link(lt.location_id, neighbor)
            self.stm.remove(candidate_id)
            del self.locations[candidate_id]
            self.deleted += 1
            logger.debug(f"Rehearsal: location {lt.location_id} absorbed {candidate_id} (weight {lt.weight})")
            return candidate_id
        return None

    def insert_stm(self, location: Location) -> None:
        self.stm.append(location.location_id)

    def promote_oldest(self) -> Optional[int]:
        """Move the oldest STM location to WM if STM is over capacity."""
        if len(self.stm) <= self.stm_size:
            return None
        location_id = self.stm.popleft()
        self.wm.add(location_id)
        return location_id

    # ---------------------------------------------------------- loop closure

    def merge_loop_closure(self, lt: Location, li: int) -> None:
        """
        Merge an accepted loop closure on ``li`` into ``lt``.

        ``li`` stays in WM, flagged merged-pending, until it leaves the
        neighbourhood of the highest hypothesis (see :meth:`purge_merged`).

        Raises:
            ContractError: If ``li`` is not in WM
        """
        if li not in self.wm:
            raise ContractError(
                f"Loop closure target {li} is not in working memory",
                invariant="merge-target-in-wm",
                location_id=li,
            )
        target = self.locations[li]
        lt.weight += target.weight + 1
        for neighbor in list(target.links):
            self._link(lt.location_id, neighbor)
        lt.member_images = sorted(set(lt.member_images) | set(target.member_images))
        self.merged_pending.add(li)
        self.merge_log.append(MergeRecord("loop", lt.location_id, li))
        logger.debug(f"Loop closure: location {lt.location_id} absorbed {li} (weight {lt.weight})")

    def purge_merged(self, top: Optional[int]) -> List[int]:
        """
        Delete merged-pending locations outside the neighbourhood of ``top``.

        Args:
            top: Highest hypothesis of this iteration, None deletes all

        Returns:
            Deleted ids
        """
        if not self.merged_pending:
            return []
        keep = neighborhood(self.graph, top, self.neighbor_radius) if top is not None else {}
        doomed = sorted(li for li in self.merged_pending if li not in keep)
        for li in doomed:
            self._delete(li)
        return doomed

    def _delete(self, location_id: int) -> None:
        location = self.locations.pop(location_id)
        self.wm.discard(location_id)
        self.merged_pending.discard(location_id)
        orphans = self.dictionary.remove_location_refs(location_id, location.signature)
        if orphans:
            self.store.keep_words(orphans)
        self._unlink_all(location_id)
        self.deleted += 1
        logger.debug(f"Deleted merged location {location_id}")

    # -------------------------------------------------------------- transfer

    def select_transfer_victims(self, words_added: int, immune: Iterable[int] = ()) -> List[int]:
        """
        Choose WM locations to transfer to LTM.

        Candidates are taken by lowest weight, then oldest id, until the
        words they would remove from the dictionary reach ``words_added``.
        At least one location is chosen when any is eligible. Retrieved,
        merged-pending and ``immune`` locations are never chosen.

        Args:
            words_added: Words added to the dictionary this iteration
            immune: Additional ids to protect (neighbourhood of the top hypothesis)

        Returns:
            Victims in selection order
        """
        excluded = self.retrieved_this_iteration | self.merged_pending | set(immune)
        candidates = sorted(
            (location_id for location_id in self.wm if location_id not in excluded),
            key=lambda location_id: (self.locations[location_id].weight, location_id),
        )
        victims: List[int] = []
        removed: Counter = Counter()
        freed = 0
        for location_id in candidates:
            victims.append(location_id)
            for word_id, count in self.locations[location_id].signature.items():
                removed[word_id] += count
                if removed[word_id] == self.dictionary.ref_count(word_id):
                    freed += 1
            if freed >= words_added:
                break
        if freed < words_added:
            logger.warning(
                f"Transfer quota unmet: {freed} words freed of {words_added} added "
                f"({len(candidates)} eligible locations)"
            )
        return victims

    def transfer(self, victims: Iterable[int]) -> int:
        """
        Move locations from WM to LTM.

        Their references leave the dictionary; words left unreferenced are
        persisted with the location that orphaned them.

        Returns:
            Number of locations transferred

        Raises:
            ContractError: If a victim is not an eligible WM location
        """
        count = 0
        for location_id in victims:
            if location_id not in self.wm or location_id in self.retrieved_this_iteration:
                raise ContractError(
                    f"Location {location_id} cannot be transferred",
                    invariant="transfer-eligibility",
                    location_id=location_id,
                )
            location = self.locations.pop(location_id)
            self.wm.discard(location_id)
            orphans = self.dictionary.remove_location_refs(location_id, location.signature)
            self.store.persist(StoredLocation.from_location(location, orphans))
            self.transferred_this_iteration.add(location_id)
            count += 1
        self.total_transferred += count
        if count:
            logger.debug(f"Transferred {count} locations to LTM")
        return count

    # ------------------------------------------------------------- retrieval

    def retrieval_candidates(self, li: int) -> List[int]:
        """LTM ids within the neighbour radius of ``li``, nearest first."""
        distances = neighborhood(self.graph, li, self.neighbor_radius)
        in_ltm = [
            location_id
            for location_id in distances
            if location_id not in self.locations and location_id in self.store
        ]
        return sorted(in_ltm, key=lambda location_id: (distances[location_id], location_id))

    def retrieve(self, li: int) -> List[int]:
        """
        Bring up to ``max_retrieved`` LTM neighbours of ``li`` back into WM.

        Retrieved words are reconciled with the dictionary and every LTM
        reference to a replaced word id is rewritten. A failed read skips
        that location with a warning.

        Returns:
            Retrieved ids
        """
        retrieved: List[int] = []
        for location_id in self.retrieval_candidates(li):
            if len(retrieved) >= self.max_retrieved:
                break
            try:
                record = self.store.fetch(location_id)
            except StoreIOError as e:
                logger.warning(f"Retrieval of location {location_id} skipped: {e}")
                continue
            if record is None:
                continue
            self._restore(record)
            retrieved.append(location_id)
        self.total_retrieved += len(retrieved)
        if retrieved:
            logger.debug(f"Retrieved {retrieved} around hypothesis {li}")
        return retrieved

    def _restore(self, record: StoredLocation) -> None:
        carried = {word.word_id: word for word in record.words}
        missing = [
            word_id
            for word_id in record.signature
            if word_id not in self.dictionary and word_id not in carried
        ]
        if missing:
            carried.update(self.store.fetch_words(missing))
        absent = [word_id for word_id in record.signature if word_id not in self.dictionary and word_id not in carried]
        if absent:
            raise ConsistencyError(
                f"Words {absent[:5]} of location {record.location_id} are neither resident nor stored",
                invariant="reference-bijection",
                location_id=record.location_id,
            )

        needed = [carried[word_id] for word_id in sorted(record.signature) if word_id not in self.dictionary]
        mapping = self.dictionary.reconcile_words(needed)
        signature = record.signature.remapped(mapping)
        self.store.discard(record.location_id)
        self.store.rewrite_word_refs(mapping)

        links = self.graph.setdefault(record.location_id, set())
        location = Location(
            location_id=record.location_id,
            signature=signature,
            weight=record.weight,
            links=links,
            member_images=list(record.member_images),
            created_at=record.created_at,
        )
        self.dictionary.add_location_refs(record.location_id, signature)
        self.locations[record.location_id] = location
        self.wm.add(record.location_id)
        self.retrieved_this_iteration.add(record.location_id)

    # ------------------------------------------------------------ invariants

    def replay_weights(self) -> Dict[int, int]:
        """Weights obtained by replaying the merge log from zero."""
        weights: Dict[int, int] = {}
        for record in self.merge_log:
            weights[record.into] = weights.get(record.into, 0) + weights.get(record.absorbed, 0) + 1
        return weights

    def check_consistency(self) -> None:
        """
        Verify the memory invariants.

        Raises:
            ConsistencyError: Naming the first invariant found broken
        """
        stm = set(self.stm)
        if len(stm) != len(self.stm):
            raise ConsistencyError("Duplicate STM entries", invariant="tier-partition")
        if len(self.stm) > self.stm_size:
            raise ConsistencyError(
                f"STM holds {len(self.stm)} locations, capacity {self.stm_size}", invariant="stm-capacity"
            )
        if stm & self.wm:
            raise ConsistencyError(f"Locations {sorted(stm & self.wm)} in STM and WM", invariant="tier-partition")
        if stm | self.wm != set(self.locations):
            raise ConsistencyError("Resident locations differ from STM and WM", invariant="tier-partition")
        in_ltm = [location_id for location_id in self.locations if location_id in self.store]
        if in_ltm:
            raise ConsistencyError(f"Locations {in_ltm} resident and in LTM", invariant="tier-partition")
        if self.created - self.deleted != len(self.stm) + len(self.wm) + len(self.store):
            raise ConsistencyError(
                f"Conservation broken: {self.created} created - {self.deleted} deleted != "
                f"{len(self.stm)} + {len(self.wm)} + {len(self.store)}",
                invariant="conservation",
            )

        for node, neighbors in self.graph.items():
            for neighbor in neighbors:
                if node not in self.graph.get(neighbor, ()):
                    raise ConsistencyError(
                        f"Link {node}->{neighbor} is not symmetric", invariant="link-symmetry", location_id=node
                    )

        expected: Counter = Counter()
        for location in self.locations.values():
            for word_id, count in location.signature.items():
                expected[(word_id, location.location_id)] += count
        if expected != self.dictionary.reference_multiset():
            raise ConsistencyError("Dictionary references differ from signatures", invariant="reference-bijection")
        orphans = [word_id for word_id, word in self.dictionary.words.items() if not word.refs]
        if orphans:
            raise ConsistencyError(f"Unreferenced words {orphans[:5]} resident", invariant="no-orphans")

        if not self.retrieved_this_iteration <= self.wm:
            raise ConsistencyError("Retrieved locations left WM", invariant="retrieved-in-wm")
        if self.retrieved_this_iteration & self.transferred_this_iteration:
            raise ConsistencyError("A retrieved location was transferred", invariant="retrieved-immune")

        replayed = self.replay_weights()
        for location in self.locations.values():
            if replayed.get(location.location_id, 0) != location.weight:
                raise ConsistencyError(
                    f"Weight of {location.location_id} is {location.weight}, replay gives "
                    f"{replayed.get(location.location_id, 0)}",
                    invariant="weight-replay",
                    location_id=location.location_id,
                )

    def get_stats(self) -> dict:
        """
        Get memory statistics.

        Returns:
            Dictionary with tier sizes and lifetime counters
        """
        return {
            "stm": len(self.stm),
            "wm": len(self.wm),
            "ltm": len(self.store),
            "created": self.created,
            "deleted": self.deleted,
            "merged_pending": len(self.merged_pending),
            "transferred": self.total_transferred,
            "retrieved": self.total_retrieved,
            "graph_nodes": len(self.graph),
        }
