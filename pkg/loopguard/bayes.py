"""
Discrete Bayesian filter over loop-closure hypotheses.

States are ``NEW_PLACE`` (-1, the current image is a new place) and every
working-memory location id. The filter predicts with a transition model over
the location graph, weighs each state with a likelihood derived from
signature similarity, and selects the best hypothesis by summing the
posterior over its graph neighbourhood.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple
import logging
import math

import numpy as np

from loopguard import constants
from loopguard.enums import HypothesisAnchor
from loopguard.exceptions import ConfigError
from loopguard.memory import Graph, Signature, neighborhood, similarity

logger = logging.getLogger(__name__)

NEW_PLACE = constants.NEW_PLACE


class Posterior:
    """
    Probability distribution over filter states.

    Example:
        >>> post = Posterior()
        >>> post[NEW_PLACE]
        1.0
    """

    def __init__(self, probs: Optional[Mapping[int, float]] = None):
        self.probs: Dict[int, float] = dict(probs) if probs is not None else {NEW_PLACE: 1.0}
        self.probs.setdefault(NEW_PLACE, 0.0)

    def __getitem__(self, state: int) -> float:
        return self.probs.get(state, 0.0)

    def __contains__(self, state: object) -> bool:
        return state in self.probs

    def __len__(self) -> int:
        return len(self.probs)

    def __iter__(self) -> Iterator[int]:
        return iter(self.probs)

    def __repr__(self) -> str:
        return f"Posterior(new={self[NEW_PLACE]:.4f}, states={len(self.probs) - 1})"

    @property
    def states(self) -> List[int]:
        """Location states (excluding NEW_PLACE), ascending."""
        return sorted(state for state in self.probs if state != NEW_PLACE)

    def total(self) -> float:
        return math.fsum(self.probs.values())

    def items(self):
        return self.probs.items()

    def copy(self) -> "Posterior":
        return Posterior(self.probs)

    def as_array(self, order: Sequence[int]) -> np.ndarray:
        return np.array([self[state] for state in order], dtype=np.float64)

    def is_normalized(self, tol: float = constants.NORMALIZATION_TOLERANCE) -> bool:
        return abs(self.total() - 1.0) <= tol and all(p >= 0.0 for p in self.probs.values())


def _normalized(probs: Dict[int, float]) -> Dict[int, float]:
    total = math.fsum(probs.values())
    return {state: p / total for state, p in probs.items()}


@dataclass
class TransitionParams:
    """
    Transition model parameters.

    Attributes:
        p_new_given_new: Probability of staying on NEW_PLACE
        p_loop_given_new: Mass from NEW_PLACE spread evenly over WM states
        p_new_given_loop: Mass from a location state back to NEW_PLACE
        neighbor_mass: Mass a location state spreads over its graph neighbourhood
        gaussian_sigma: Width of the discretized Gaussian, in links
        radius: Neighbourhood radius, in links
    """

    p_new_given_new: float = constants.P_NEW_GIVEN_NEW
    p_loop_given_new: float = constants.P_LOOP_GIVEN_NEW
    p_new_given_loop: float = constants.P_NEW_GIVEN_LOOP
    neighbor_mass: float = constants.NEIGHBOR_MASS
    gaussian_sigma: float = constants.DEFAULT_GAUSSIAN_SIGMA
    radius: int = constants.DEFAULT_NEIGHBOR_RADIUS
    _weights: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def validate(self) -> None:
        if self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive", field="gaussian_sigma", value=self.gaussian_sigma)
        if self.radius < 0:
            raise ConfigError("radius must be non-negative", field="radius", value=self.radius)
        for name in ("p_new_given_new", "p_loop_given_new", "p_new_given_loop", "neighbor_mass"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]", field=name, value=value)

    @property
    def weights(self) -> np.ndarray:
        """Gaussian weights for offsets ``-radius..radius``, summing to ``neighbor_mass``."""
        if self._weights is None:
            offsets = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
            raw = np.exp(-(offsets**2) / (2.0 * self.gaussian_sigma**2))
            self._weights = raw * (self.neighbor_mass / raw.sum())
        return self._weights

    def weight(self, offset: int) -> float:
        if abs(offset) > self.radius:
            return 0.0
        return float(self.weights[offset + self.radius])


def signed_offsets(graph: Graph, origin: int, radius: int) -> Dict[int, int]:
    """
    Signed graph offsets around ``origin``.

    The magnitude is the breadth-first distance; the sign is that of
    ``node - origin`` so newer locations sit at positive offsets.
    """
    return {
        node: (distance if node > origin else -distance)
        for node, distance in neighborhood(graph, origin, radius).items()
    }


def transition_row(origin: int, graph: Graph, states: Set[int], params: TransitionParams) -> Dict[int, float]:
    """
    Loop-to-loop transition mass from location state ``origin``.

    Each offset's Gaussian weight is split evenly among the graph nodes at
    that offset; mass addressed to nodes that are not states is dropped.
    """
    groups: Dict[int, List[int]] = {}
    for node, offset in signed_offsets(graph, origin, params.radius).items():
        groups.setdefault(offset, []).append(node)
    row: Dict[int, float] = {}
    for offset, nodes in groups.items():
        share = params.weight(offset) / len(nodes)
        for node in nodes:
            if node in states:
                row[node] = row.get(node, 0.0) + share
    return row


def predict(prev: Posterior, wm_states: Sequence[int], graph: Graph, params: TransitionParams) -> Posterior:
    """
    Prior over the states of this iteration.

    Args:
        prev: Last posterior, over the same states
        wm_states: Current WM location ids
        graph: Location graph
        params: Transition model

    Returns:
        Normalized prior
    """
    states = set(wm_states)
    n_states = len(states)
    prev_new = prev[NEW_PLACE]
    loop_mass = math.fsum(p for state, p in prev.items() if state != NEW_PLACE)

    prior: Dict[int, float] = {NEW_PLACE: params.p_new_given_new * prev_new + params.p_new_given_loop * loop_mass}
    spread = prev_new * params.p_loop_given_new / n_states if n_states else 0.0
    for state in states:
        prior[state] = spread
    for origin, p in prev.items():
        if origin == NEW_PLACE or p <= 0.0:
            continue
        for state, mass in transition_row(origin, graph, states, params).items():
            prior[state] += mass * p

    if math.fsum(prior.values()) <= 0.0:
        return Posterior({NEW_PLACE: 1.0, **{state: 0.0 for state in states}})
    return Posterior(_normalized(prior))


@dataclass
class LikelihoodResult:
    """
    Observation likelihood of every state.

    Attributes:
        scores: Similarity of the new signature to each WM state
        mu: Mean of the non-null scores
        sigma: Population standard deviation of the non-null scores
        values: Likelihood per state, NEW_PLACE included
    """

    scores: Dict[int, float]
    mu: float
    sigma: float
    values: Dict[int, float]


def likelihood_from_scores(scores: Mapping[int, float]) -> LikelihoodResult:
    """
    Turn similarity scores into likelihoods.

    A state scoring at least ``mu + sigma`` gets ``(s - sigma) / mu``, every
    other state 1. NEW_PLACE gets ``mu / sigma + 1``. When sigma is 0 and mu
    is positive NEW_PLACE gets ``10 * (len(scores) + 1)``, ten times the number of
    filter states; with no non-null score every likelihood is 1.

    Example:
        >>> result = likelihood_from_scores({0: 0.2, 1: 0.4, 2: 0.6})
        >>> round(result.values[2], 4)
        1.0918
    """
    non_null = np.array([s for s in scores.values() if s > 0.0], dtype=np.float64)
    values: Dict[int, float] = {state: 1.0 for state in scores}
    if non_null.size == 0:
        values[NEW_PLACE] = 1.0
        return LikelihoodResult(dict(scores), 0.0, 0.0, values)

    mu = float(non_null.mean())
    sigma = float(non_null.std())
    if sigma <= constants.NORMALIZATION_TOLERANCE * mu:
        sigma = 0.0
    for state, s in scores.items():
        if s > 0.0 and s >= mu + sigma:
            values[state] = (s - sigma) / mu
    if sigma == 0.0:
        values[NEW_PLACE] = constants.DEGENERATE_NEW_PLACE_FACTOR * (len(scores) + 1)
    else:
        values[NEW_PLACE] = mu / sigma + 1.0
    return LikelihoodResult(dict(scores), mu, sigma, values)


def compute_likelihood(
    zt: Signature, wm_states: Sequence[int], signatures: Mapping[int, Signature]
) -> LikelihoodResult:
    """
    Likelihood of every WM state for the signature ``zt``.

    Args:
        zt: Signature of the current location
        wm_states: WM location ids
        signatures: Signature of each WM location

    Returns:
        Scores, statistics and likelihood values
    """
    scores = {state: similarity(zt, signatures[state]) for state in wm_states}
    return likelihood_from_scores(scores)


def update(prior: Posterior, likelihood: LikelihoodResult) -> Posterior:
    """
    Posterior proportional to likelihood times prior.

    Falls back to a uniform distribution, with a warning, when every
    product is zero.
    """
    product = {state: likelihood.values.get(state, 1.0) * p for state, p in prior.items()}
    if math.fsum(product.values()) <= 0.0:
        logger.warning(f"Degenerate posterior over {len(product)} states, resetting to uniform")
        return Posterior({state: 1.0 / len(product) for state in product})
    return Posterior(_normalized(product))


def adjust_states(post: Posterior, removed: Iterable[int] = (), added: Iterable[int] = ()) -> Posterior:
    """
    Drop and add location states.

    Removed states lose their mass, added ones start at zero and the result
    is renormalized. If no mass is left it all goes to NEW_PLACE.
    """
    probs = dict(post.probs)
    for state in removed:
        if state != NEW_PLACE:
            probs.pop(state, None)
    for state in added:
        probs.setdefault(state, 0.0)
    total = math.fsum(probs.values())
    if total <= 0.0:
        probs = {state: 0.0 for state in probs}
        probs[NEW_PLACE] = 1.0
        return Posterior(probs)
    return Posterior({state: p / total for state, p in probs.items()})


def align_states(post: Posterior, wm_states: Iterable[int]) -> Posterior:
    """Make the posterior's location states equal to ``wm_states``."""
    target = set(wm_states)
    current = set(post.states)
    if target == current:
        return post
    return adjust_states(post, removed=current - target, added=target - current)


@dataclass(frozen=True)
class Hypothesis:
    """A loop-closure hypothesis and its neighbourhood-summed probability."""

    location_id: int
    probability: float


def window_sum(post: Posterior, graph: Graph, state: int, radius: int) -> float:
    """Posterior summed over ``state`` and its graph neighbours within ``radius``."""
    return min(1.0, math.fsum(post[node] for node in neighborhood(graph, state, radius) if node in post))


def peak(post: Posterior) -> Optional[int]:
    """Location state with the highest posterior (lowest id on ties), None if no state has mass."""
    best: Optional[int] = None
    best_p = 0.0
    for state in post.states:
        p = post[state]
        if p > best_p:
            best, best_p = state, p
    return best


def strongest_in_window(post: Posterior, graph: Graph, state: int, radius: int) -> int:
    """
    Location state of highest posterior within ``radius`` links of ``state``.

    Lowest id on ties; ``state`` itself when nothing in the window has more mass.
    """
    best, best_p = state, post[state]
    for node in sorted(neighborhood(graph, state, radius)):
        if node in post and node != NEW_PLACE and post[node] > best_p:
            best, best_p = node, post[node]
    return best


def best_hypothesis(
    post: Posterior,
    graph: Graph,
    radius: int = constants.DEFAULT_NEIGHBOR_RADIUS,
    anchor: HypothesisAnchor = HypothesisAnchor.WINDOW,
) -> Optional[Hypothesis]:
    """
    Highest hypothesis before thresholding.

    With the WINDOW anchor every state is scored by its neighbourhood sum and
    the largest sum wins (lowest id on ties). With the PEAK anchor the
    hypothesis is the state of highest posterior, scored by its
    neighbourhood sum.
    """
    if anchor == HypothesisAnchor.PEAK:
        top = peak(post)
        if top is None:
            return None
        return Hypothesis(top, window_sum(post, graph, top, radius))

    best: Optional[Hypothesis] = None
    for state in post.states:
        score = window_sum(post, graph, state, radius)
        if best is None or score > best.probability:
            best = Hypothesis(state, score)
    return best


def select_hypothesis(
    post: Posterior,
    graph: Graph,
    n_wm: int,
    loop_threshold: float = constants.DEFAULT_LOOP_THRESHOLD,
    min_hypotheses: int = constants.DEFAULT_MIN_HYPOTHESES,
    radius: int = constants.DEFAULT_NEIGHBOR_RADIUS,
    anchor: HypothesisAnchor = HypothesisAnchor.WINDOW,
) -> Optional[Hypothesis]:
    """
    Accepted loop-closure hypothesis, if any.

    Args:
        post: Normalized posterior
        graph: Location graph
        n_wm: Number of WM locations
        loop_threshold: Summed probability that must be exceeded
        min_hypotheses: Minimum WM size for any acceptance
        radius: Neighbourhood radius
        anchor: How the hypothesis is located

    Returns:
        The hypothesis if its sum exceeds ``loop_threshold`` and WM holds
        at least ``min_hypotheses`` locations, else None
    """
    if n_wm < min_hypotheses:
        return None
    hypothesis = best_hypothesis(post, graph, radius, anchor)
    if hypothesis is None or hypothesis.probability <= loop_threshold:
        return None
    return hypothesis


class LoopClosureFilter:
    """
    Posterior carried across iterations.

    Example:
        >>> bayes = LoopClosureFilter(TransitionParams())
        >>> post, likelihood = bayes.step(signature, memory.wm_states(), signatures, memory.graph)
    """

    def __init__(self, params: Optional[TransitionParams] = None):
        self.params = params or TransitionParams()
        self.params.validate()
        self.posterior = Posterior()

    def align(self, wm_states: Iterable[int]) -> Posterior:
        self.posterior = align_states(self.posterior, wm_states)
        return self.posterior

    def step(
        self,
        zt: Signature,
        wm_states: Sequence[int],
        signatures: Mapping[int, Signature],
        graph: Graph,
    ) -> Tuple[Posterior, Optional[LikelihoodResult]]:
        """
        Run one predict/update cycle over ``wm_states``.

        With no WM states the posterior is all on NEW_PLACE and no
        likelihood is computed.
        """
        self.align(wm_states)
        if not wm_states:
            self.posterior = Posterior()
            return self.posterior, None
        prior = predict(self.posterior, wm_states, graph, self.params)
        likelihood = compute_likelihood(zt, wm_states, signatures)
        self.posterior = update(prior, likelihood)
        return self.posterior, likelihood

    def adjust(self, removed: Iterable[int] = (), added: Iterable[int] = ()) -> Posterior:
        self.posterior = adjust_states(self.posterior, removed, added)
        return self.posterior
