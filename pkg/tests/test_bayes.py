"""
Tests for loopguard.bayes module.

The sparse filter is checked against a dense column-stochastic transition
matrix built from scratch.
"""

import math

import numpy as np
import pytest

from loopguard import constants
from loopguard.bayes import (
    NEW_PLACE,
    Hypothesis,
    LikelihoodResult,
    LoopClosureFilter,
    Posterior,
    TransitionParams,
    adjust_states,
    align_states,
    best_hypothesis,
    compute_likelihood,
    likelihood_from_scores,
    peak,
    predict,
    select_hypothesis,
    signed_offsets,
    strongest_in_window,
    transition_row,
    update,
)
from loopguard.dictionary import Signature
from loopguard.enums import HypothesisAnchor
from loopguard.exceptions import ConfigError
from tests.helpers import bfs_distances, brute_similarity, chain_graph, dense_transition


def _random_posterior(rng, states):
    raw = rng.random(len(states) + 1)
    raw /= raw.sum()
    return Posterior({NEW_PLACE: raw[0], **{s: raw[k + 1] for k, s in enumerate(states)}})


def _as_vector(post, states):
    return post.as_array([NEW_PLACE] + list(states))


def _dense_likelihood(scores):
    """Likelihood vector, NEW_PLACE first, computed directly from the score statistics."""
    values = np.array(scores, dtype=np.float64)
    out = np.ones(len(values) + 1)
    non_null = values[values > 0.0]
    if non_null.size == 0:
        return out
    mu = non_null.mean()
    sigma = non_null.std()
    if sigma <= constants.NORMALIZATION_TOLERANCE * mu:
        sigma = 0.0
    boosted = (values > 0.0) & (values >= mu + sigma)
    out[1:][boosted] = (values[boosted] - sigma) / mu
    out[0] = constants.DEGENERATE_NEW_PLACE_FACTOR * (len(values) + 1) if sigma == 0.0 else mu / sigma + 1.0
    return out


def _random_signature(rng, vocabulary=12):
    return Signature(int(w) for w in rng.integers(0, vocabulary, size=int(rng.integers(1, 7))))


def _next_states(rng, current, universe=30, capacity=15):
    """Drop and add random states, keeping between 1 and ``capacity``."""
    current = set(current)
    if len(current) > 1 and rng.random() < 0.5:
        dropped = rng.choice(sorted(current), size=int(rng.integers(1, len(current))), replace=False)
        current -= {int(s) for s in dropped}
    if len(current) < capacity and rng.random() < 0.5:
        absent = sorted(set(range(universe)) - current)
        added = rng.choice(absent, size=int(rng.integers(1, capacity - len(current) + 1)), replace=False)
        current |= {int(s) for s in added}
    return sorted(current)


@pytest.fixture
def shortcut_graph():
    """Chain 0..14 with a shortcut 2-11 and a node 99 that is not a state."""
    graph = chain_graph(list(range(15)))
    for a, b in ((2, 11), (7, 99)):
        graph[a].add(b)
        graph.setdefault(b, set()).add(a)
    return graph


@pytest.mark.unit
class TestTransitionParams:
    """Test the discretized Gaussian."""

    def test_weights(self):
        weights = TransitionParams().weights
        assert len(weights) == 9
        assert math.fsum(weights) == pytest.approx(0.9)
        np.testing.assert_allclose(weights, weights[::-1])
        assert int(np.argmax(weights)) == 4

    def test_weight_outside_radius(self):
        params = TransitionParams()
        assert params.weight(5) == 0.0
        assert params.weight(-4) == pytest.approx(params.weights[0])

    @pytest.mark.parametrize(
        "field,value",
        [("gaussian_sigma", 0.0), ("radius", -1), ("p_new_given_new", 1.5), ("neighbor_mass", -0.1)],
    )
    def test_validate(self, field, value):
        params = TransitionParams(**{field: value})
        with pytest.raises(ConfigError) as exc_info:
            params.validate()
        assert exc_info.value.field == field


@pytest.mark.unit
class TestTransition:
    """Test graph offsets and transition rows."""

    def test_signed_offsets_on_chain(self):
        offsets = signed_offsets(chain_graph(list(range(11))), 5, 4)
        assert offsets == {1: -4, 2: -3, 3: -2, 4: -1, 5: 0, 6: 1, 7: 2, 8: 3, 9: 4}

    def test_row_drops_mass_to_non_states(self, shortcut_graph):
        params = TransitionParams()
        states = set(range(15))
        row = transition_row(7, shortcut_graph, states, params)
        assert 99 not in row
        assert math.fsum(row.values()) < params.neighbor_mass

    def test_predict_from_new_place(self):
        """Test all mass on NEW_PLACE spreads 0.1 evenly over the states."""
        states = [0, 1, 2, 3]
        prev = align_states(Posterior(), states)
        prior = predict(prev, states, chain_graph(states), TransitionParams())
        assert prior[NEW_PLACE] == pytest.approx(0.9)
        for state in states:
            assert prior[state] == pytest.approx(0.025)

    def test_predict_matches_dense_matrix(self, shortcut_graph):
        """Test the sparse prediction equals the dense matrix product, normalized."""
        rng = np.random.default_rng(4)
        params = TransitionParams()
        states = list(range(15))
        matrix = dense_transition(states, shortcut_graph, params.weights, params.radius)
        for _ in range(20):
            prev = _random_posterior(rng, states)
            expected = matrix @ _as_vector(prev, states)
            expected /= expected.sum()
            prior = predict(prev, states, shortcut_graph, params)
            np.testing.assert_allclose(_as_vector(prior, states), expected, atol=1e-9)
            assert prior.is_normalized()

    def test_filter_matches_dense_recursion(self, shortcut_graph):
        """Test repeated predict/update equals the dense recursion."""
        rng = np.random.default_rng(9)
        params = TransitionParams()
        states = list(range(15))
        matrix = dense_transition(states, shortcut_graph, params.weights, params.radius)

        post = align_states(Posterior(), states)
        dense = _as_vector(post, states)
        for _ in range(30):
            values = {NEW_PLACE: float(rng.uniform(0.5, 3.0))}
            values.update({s: float(rng.uniform(1.0, 2.0)) for s in states})
            likelihood = LikelihoodResult({}, 0.0, 0.0, values)

            post = update(predict(post, states, shortcut_graph, params), likelihood)
            dense = _as_vector(Posterior(values), states) * (matrix @ dense)
            dense /= dense.sum()
            np.testing.assert_allclose(_as_vector(post, states), dense, atol=1e-9)


@pytest.mark.unit
class TestLikelihood:
    """Test the similarity-to-likelihood mapping."""

    def test_worked_example(self):
        result = likelihood_from_scores({0: 0.2, 1: 0.4, 2: 0.6})
        sigma = math.sqrt(0.08 / 3)
        assert result.mu == pytest.approx(0.4)
        assert result.sigma == pytest.approx(sigma)
        assert result.values[0] == 1.0
        assert result.values[1] == 1.0
        assert result.values[2] == pytest.approx((0.6 - sigma) / 0.4)
        assert result.values[NEW_PLACE] == pytest.approx(0.4 / sigma + 1.0)

    def test_all_zero_scores(self):
        result = likelihood_from_scores({0: 0.0, 1: 0.0})
        assert result.values == {0: 1.0, 1: 1.0, NEW_PLACE: 1.0}

    def test_equal_scores(self):
        """Test a zero deviation gives NEW_PLACE ten times the filter state count, itself included."""
        result = likelihood_from_scores({i: 0.5 for i in range(4)})
        assert result.sigma == 0.0
        assert result.values[NEW_PLACE] == pytest.approx(50.0)
        assert all(result.values[i] == pytest.approx(1.0) for i in range(4))

    def test_new_place_grows_with_mean(self):
        """Test shifting every score up raises the NEW_PLACE likelihood."""
        previous = 0.0
        for shift in (0.0, 0.1, 0.2, 0.3):
            result = likelihood_from_scores({0: 0.1 + shift, 1: 0.3 + shift, 2: 0.5 + shift})
            assert result.values[NEW_PLACE] > previous
            previous = result.values[NEW_PLACE]

    def test_compute_likelihood(self):
        signatures = {0: Signature({1: 1, 2: 1}), 1: Signature({3: 1})}
        result = compute_likelihood(Signature({1: 1, 2: 1}), [0, 1], signatures)
        assert result.scores == {0: 1.0, 1: 0.0}


@pytest.mark.unit
class TestUpdateAndAdjust:
    """Test update and state adjustment."""

    def test_update_normalizes(self):
        prior = Posterior({NEW_PLACE: 0.5, 0: 0.5})
        post = update(prior, LikelihoodResult({}, 0.0, 0.0, {NEW_PLACE: 1.0, 0: 3.0}))
        assert post[0] == pytest.approx(0.75)
        assert post.is_normalized()

    def test_update_degenerate_resets_uniform(self, caplog):
        prior = Posterior({NEW_PLACE: 1.0, 0: 0.0})
        with caplog.at_level("WARNING", logger="loopguard.bayes"):
            post = update(prior, LikelihoodResult({}, 0.0, 0.0, {NEW_PLACE: 0.0, 0: 1.0}))
        assert post[NEW_PLACE] == pytest.approx(0.5)
        assert post[0] == pytest.approx(0.5)
        assert "Degenerate" in caplog.text

    def test_adjust_removes_and_adds(self):
        post = adjust_states(Posterior({NEW_PLACE: 0.2, 0: 0.3, 1: 0.5}), removed=[1], added=[7])
        assert post.states == [0, 7]
        assert post[0] == pytest.approx(0.6)
        assert post[7] == 0.0
        assert post.is_normalized()

    def test_adjust_without_mass_resets(self):
        post = adjust_states(Posterior({NEW_PLACE: 0.0, 0: 1.0}), removed=[0], added=[3])
        assert post[NEW_PLACE] == 1.0
        assert post[3] == 0.0

    def test_new_place_cannot_be_removed(self):
        post = adjust_states(Posterior({NEW_PLACE: 0.5, 0: 0.5}), removed=[NEW_PLACE])
        assert post[NEW_PLACE] == pytest.approx(0.5)

    def test_align_is_identity_when_equal(self):
        post = Posterior({NEW_PLACE: 0.5, 0: 0.5})
        assert align_states(post, [0]) is post


@pytest.mark.unit
class TestHypotheses:
    """Test hypothesis selection."""

    @pytest.fixture
    def two_clusters(self):
        """A lone spike on state 3 and a wider cluster on 15..17."""
        states = list(range(21))
        probs = {s: 0.0 for s in states}
        probs.update({NEW_PLACE: 0.1, 3: 0.3, 15: 0.2, 16: 0.2, 17: 0.2})
        return Posterior(probs), chain_graph(states)

    def test_peak(self, two_clusters):
        post, _ = two_clusters
        assert peak(post) == 3
        assert peak(Posterior()) is None
        assert peak(Posterior({NEW_PLACE: 0.0, 4: 0.5, 2: 0.5})) == 2

    def test_peak_anchor(self, two_clusters):
        post, graph = two_clusters
        hypothesis = best_hypothesis(post, graph, anchor=HypothesisAnchor.PEAK)
        assert hypothesis.location_id == 3
        assert hypothesis.probability == pytest.approx(0.3)

    def test_window_anchor_against_brute_force(self, two_clusters):
        """Test the window anchor finds the largest neighbourhood sum."""
        post, graph = two_clusters
        sums = {
            s: sum(post[n] for n, d in bfs_distances(graph, s).items() if d <= 4)
            for s in post.states
        }
        hypothesis = best_hypothesis(post, graph, anchor=HypothesisAnchor.WINDOW)
        assert hypothesis.probability == pytest.approx(max(sums.values()))
        assert sums[hypothesis.location_id] == pytest.approx(0.6)

    def test_gates(self, two_clusters):
        """Test acceptance follows the largest neighbourhood sum, not the peak."""
        post, graph = two_clusters
        sums = {
            s: math.fsum(post[n] for n, d in bfs_distances(graph, s).items() if d <= 4)
            for s in post.states
        }
        best = max(sums.values())
        expected = min(s for s, total in sums.items() if total == best)

        accepted = select_hypothesis(post, graph, n_wm=21, loop_threshold=0.5, min_hypotheses=15)

        assert isinstance(accepted, Hypothesis)
        assert accepted.location_id == expected == 13
        assert accepted.probability == pytest.approx(0.6)
        assert select_hypothesis(post, graph, n_wm=14, loop_threshold=0.5, min_hypotheses=15) is None
        assert select_hypothesis(post, graph, n_wm=21, loop_threshold=0.65, min_hypotheses=15) is None

    def test_default_anchor_is_window(self, two_clusters):
        post, graph = two_clusters
        assert best_hypothesis(post, graph) == best_hypothesis(post, graph, anchor=HypothesisAnchor.WINDOW)
        assert best_hypothesis(post, graph).location_id == 13

    def test_strongest_in_window(self, two_clusters):
        post, graph = two_clusters
        assert strongest_in_window(post, graph, 13, 4) == 15
        assert strongest_in_window(post, graph, 5, 4) == 3
        assert strongest_in_window(post, graph, 10, 1) == 10

    def test_no_states(self):
        assert best_hypothesis(Posterior(), {}) is None
        assert best_hypothesis(Posterior(), {}, anchor=HypothesisAnchor.WINDOW) is None


@pytest.mark.unit
class TestLoopClosureFilter:
    """Test LoopClosureFilter.step."""

    def test_empty_wm(self):
        bayes = LoopClosureFilter()
        post, likelihood = bayes.step(Signature({1: 1}), [], {}, {})
        assert likelihood is None
        assert post[NEW_PLACE] == 1.0
        assert post.states == []

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(100))
    def test_step_matches_dense_filter(self, seed):
        """Test steps over a changing WM equal the dense filter with a from-scratch likelihood."""
        rng = np.random.default_rng(seed)
        params = TransitionParams()
        graph = chain_graph(list(range(30)))
        for _ in range(3):
            a, b = (int(v) for v in rng.choice(30, size=2, replace=False))
            graph[a].add(b)
            graph[b].add(a)
        signatures = {s: _random_signature(rng) for s in range(30)}

        bayes = LoopClosureFilter(params)
        states = sorted(int(s) for s in rng.choice(30, size=int(rng.integers(1, 16)), replace=False))
        dense = {NEW_PLACE: 1.0}
        for _ in range(30):
            kept = {s: p for s, p in dense.items() if s == NEW_PLACE or s in states}
            total = math.fsum(kept.values())
            vector = np.array([kept.get(s, 0.0) for s in [NEW_PLACE] + states])
            if total > 0.0:
                vector /= total
            else:
                vector[0] = 1.0

            zt = _random_signature(rng)
            prior = dense_transition(states, graph, params.weights, params.radius) @ vector
            prior /= prior.sum()
            vector = _dense_likelihood([brute_similarity(zt, signatures[s]) for s in states]) * prior
            vector /= vector.sum()

            post, likelihood = bayes.step(zt, states, signatures, graph)

            assert post.states == states
            assert sorted(likelihood.scores) == states
            np.testing.assert_allclose(_as_vector(post, states), vector, atol=1e-9)
            dense = dict(zip([NEW_PLACE] + states, vector))
            states = _next_states(rng, states)

    def test_step_tracks_wm_states(self):
        """Test the posterior follows WM membership and stays normalized."""
        rng = np.random.default_rng(2)
        bayes = LoopClosureFilter()
        states = list(range(20))
        graph = chain_graph(states)
        signatures = {s: Signature({s: 2, s + 1: 1, s + 2: 1}) for s in states}
        for t in range(10):
            current = states[: 10 + t]
            zt = Signature({int(w): 1 for w in rng.integers(0, 25, size=6)})
            post, likelihood = bayes.step(zt, current, signatures, graph)
            assert post.states == current
            assert set(likelihood.scores) == set(current)
            assert post.is_normalized()

    def test_repeated_match_gains_mass(self):
        """Test a state that keeps matching ends up with the peak."""
        bayes = LoopClosureFilter()
        states = list(range(20))
        graph = chain_graph(states)
        signatures = {s: Signature({s: 1, 2000: 1}) for s in states}
        signatures[8] = Signature({1000: 1, 1001: 1, 1002: 1})
        zt = Signature({1000: 1, 1001: 1, 1002: 1, 2000: 1})
        for _ in range(5):
            post, _ = bayes.step(zt, states, signatures, graph)
        assert peak(post) == 8
