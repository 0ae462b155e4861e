"""
Builders and reference implementations shared by the tests.
"""

from collections import Counter
from typing import Dict, Iterable, List, Sequence, Set

import numpy as np

from loopguard.dictionary import Signature, VisualWord
from loopguard.ingest import DescriptorSet
from loopguard.store import StoredLocation


def make_descriptors(seed: int, n: int = 20, dim: int = 32) -> np.ndarray:
    """
    Descriptors clustered around a seed-specific direction.

    Clusters of different seeds are about 140 apart while points of one
    cluster lie within a unit cube, so the distance ratio test never matches
    across seeds and always matches an identical descriptor.
    """
    rng = np.random.default_rng(seed)
    center = rng.normal(size=dim)
    center *= 100.0 / np.linalg.norm(center)
    return (center + rng.random((n, dim))).astype(np.float32)


def make_frame(image_id: int, seed: int, n: int = 20, dim: int = 32) -> DescriptorSet:
    return DescriptorSet(image_id, make_descriptors(seed, n, dim))


def make_record(location_id: int, word_ids: Iterable[int] = (1, 2), weight: int = 0, words=()) -> StoredLocation:
    return StoredLocation(
        location_id=location_id,
        weight=weight,
        signature=Signature({w: 1 for w in word_ids}),
        neighbor_links=[location_id - 1] if location_id > 0 else [],
        member_images=[location_id],
        created_at=location_id,
        words=list(words),
    )


def make_word(word_id: int, dim: int = 4) -> VisualWord:
    return VisualWord(word_id, np.full(dim, float(word_id), dtype=np.float32))


def chain_graph(ids: Sequence[int]) -> Dict[int, Set[int]]:
    graph: Dict[int, Set[int]] = {i: set() for i in ids}
    for a, b in zip(ids, ids[1:]):
        graph[a].add(b)
        graph[b].add(a)
    return graph


def brute_similarity(za: Counter, zb: Counter) -> float:
    """Pair counting by expanding both multisets."""
    a = sorted(za.elements())
    b = list(zb.elements())
    if not a or not b:
        return 0.0
    pairs = 0
    for word in a:
        if word in b:
            b.remove(word)
            pairs += 1
    return pairs / max(sum(za.values()), sum(zb.values()))


def bfs_distances(graph: Dict[int, Set[int]], origin: int) -> Dict[int, int]:
    """Unbounded breadth-first distances."""
    distances = {origin: 0}
    queue = [origin]
    while queue:
        node = queue.pop(0)
        for neighbor in graph.get(node, ()):
            if neighbor not in distances:
                distances[neighbor] = distances[node] + 1
                queue.append(neighbor)
    return distances


def dense_transition(states: List[int], graph, weights: np.ndarray, radius: int,
                     p_new_new=0.9, p_loop_new=0.1, p_new_loop=0.1) -> np.ndarray:
    """
    Column-stochastic transition matrix ``T[i, j] = p(S_t = i | S_t-1 = j)``.

    Index 0 is the new-place state, index k + 1 is ``states[k]``.
    """
    n = len(states)
    index = {s: k + 1 for k, s in enumerate(states)}
    matrix = np.zeros((n + 1, n + 1))
    matrix[0, 0] = p_new_new
    for s in states:
        matrix[index[s], 0] = p_loop_new / n
    for j in states:
        matrix[0, index[j]] = p_new_loop
        distances = {k: v for k, v in bfs_distances(graph, j).items() if v <= radius}
        groups: Dict[int, List[int]] = {}
        for node, d in distances.items():
            offset = d if node > j else -d
            groups.setdefault(offset, []).append(node)
        for offset, nodes in groups.items():
            for node in nodes:
                if node in index:
                    matrix[index[node], index[j]] += weights[offset + radius] / len(nodes)
    return matrix
