import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyasr import autodiff as ad
from noisyasr.ctc import (InfeasibleTargetError, collapse, ctc_brute_force, ctc_forward_backward, ctc_loss,
                          ctc_loss_batch, greedy_decode, greedy_path, min_frames)


def random_log_probs(rng, T, V):
    z = rng.standard_normal((T, V)) * 2
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def path_sum_prob_space(lp, target):
    """Probability-space path sum: a second oracle not sharing the log-sum-exp helper."""
    T, V = lp.shape
    p = np.exp(lp)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == list(target):
            total += math.prod(p[t, s] for t, s in enumerate(path))
    return -math.log(total)


def test_single_frame_single_symbol():
    lp = np.log(np.full((1, 2), 0.5))
    assert ctc_forward_backward(lp, [1])[0] == pytest.approx(math.log(2), abs=1e-12)


def test_two_frames_three_paths():
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc_forward_backward(lp, [1])[0] == pytest.approx(-math.log(0.75), abs=1e-12)
    assert ctc_forward_backward(lp, [1])[0] == pytest.approx(0.2877, abs=1e-4)


def test_t1_probability_is_frame_probability():
    rng = np.random.default_rng(0)
    lp = random_log_probs(rng, 1, 4)
    assert ctc_brute_force(lp, [2]) == pytest.approx(-lp[0, 2], abs=1e-12)


@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_dp_matches_both_oracles(T):
    rng = np.random.default_rng(T)
    targets = [(a,) for a in (1, 2)] + [(a, b) for a in (1, 2) for b in (1, 2)]
    for _ in range(20):
        lp = random_log_probs(rng, T, 3)
        for tgt in targets:
            if min_frames(tgt) > T:
                continue
            dp = ctc_forward_backward(lp, tgt)[0]
            assert abs(dp - ctc_brute_force(lp, tgt)) < 1e-9
            assert abs(dp - path_sum_prob_space(lp, tgt)) < 1e-9


@pytest.mark.parametrize("target, T", [([1, 1], 2), ([1, 2, 1], 2), ([1], 0)])
def test_infeasible_targets_raise(target, T):
    lp = np.log(np.full((max(T, 1), 3), 1 / 3))[:T] if T else np.zeros((0, 3))
    with pytest.raises(InfeasibleTargetError):
        ctc_forward_backward(lp, target)
    if T:
        with pytest.raises(InfeasibleTargetError):
            ctc_brute_force(lp, target)


def test_repeat_needs_separating_blank():
    assert min_frames([1, 1]) == 3
    assert min_frames([1, 2]) == 2
    lp = np.log(np.full((3, 2), 0.5))
    # only path: a _ a
    assert ctc_forward_backward(lp, [1, 1])[0] == pytest.approx(3 * math.log(2), abs=1e-12)


@pytest.mark.parametrize("bad", [[0], [3], []])
def test_invalid_target_symbols(bad):
    with pytest.raises(ValueError):
        ctc_forward_backward(np.log(np.full((3, 3), 1 / 3)), bad)


def test_brute_force_enumeration_bound():
    with pytest.raises(ValueError):
        ctc_brute_force(np.zeros((7, 2)), [1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 12), V=st.integers(2, 6), L=st.integers(1, 5))
def test_loss_properties(seed, T, V, L):
    rng = np.random.default_rng(seed)
    target = list(rng.integers(1, V, size=L))
    if min_frames(target) > T:
        return
    lp = random_log_probs(rng, T, V)
    nll, grad = ctc_forward_backward(lp, target)
    assert nll >= 0
    # gradient w.r.t. log-probs is minus the per-frame symbol occupancy: rows sum to -1,
    # so the gradient w.r.t. logits (through log-softmax) sums to zero per frame
    np.testing.assert_allclose(grad.sum(axis=1), -1.0, atol=1e-10)
    p = np.exp(lp)
    g_logits = grad - p * grad.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g_logits.sum(axis=1), 0.0, atol=1e-10)


def test_long_sequence_stays_finite():
    rng = np.random.default_rng(3)
    lp = random_log_probs(rng, 2000, 5) * 20  # very peaked, would underflow in probability space
    lp -= np.log(np.exp(lp - lp.max(1, keepdims=True)).sum(1, keepdims=True)) + lp.max(1, keepdims=True)
    nll, grad = ctc_forward_backward(lp, list(rng.integers(1, 5, size=50)))
    assert np.isfinite(nll) and np.all(np.isfinite(grad))


def test_gradient_through_log_softmax_matches_finite_differences():
    rng = np.random.default_rng(5)
    logits = ad.param(rng.standard_normal((6, 4)))
    target = [1, 3, 3]
    err = ad.check_gradients(lambda: ctc_loss(ad.log_softmax(logits, axis=-1), target), [logits], h=1e-5)
    assert err < 1e-4


def test_batch_loss_is_mean():
    rng = np.random.default_rng(2)
    lp = np.stack([random_log_probs(rng, 5, 3) for _ in range(3)])
    targets = [[1], [1, 2], [2, 2]]
    batch = ctc_loss_batch(ad.param(lp), targets)
    singles = [ctc_forward_backward(lp[b], targets[b])[0] for b in range(3)]
    assert float(batch.value) == pytest.approx(np.mean(singles), abs=1e-12)
    with pytest.raises(ValueError):
        ctc_loss_batch(ad.param(lp), targets[:2])


def one_hot_log(path, V):
    lp = np.full((len(path), V), -30.0)
    lp[np.arange(len(path)), path] = 0.0
    return lp


@pytest.mark.parametrize("path, text", [
    ([1, 1, 0, 1], "aa"),
    ([0, 0, 0], ""),
    ([0, 2, 2, 0, 2], "bb"),
])
def test_greedy_examples(path, text):
    assert greedy_decode(one_hot_log(path, 3), ("_", "a", "b")) == text


def test_greedy_tie_goes_to_lowest_index():
    assert greedy_path(np.log(np.full((2, 3), 1 / 3))) == []
    assert greedy_path(np.array([[-5.0, -1.0, -1.0]])) == [1]


@settings(max_examples=50, deadline=None)
@given(path=st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_greedy_idempotent_on_one_hot_reencoding(path):
    labels = greedy_path(one_hot_log(path, 5))
    assert labels == collapse(path)
    if labels:
        # one-hot re-encoding with blanks between symbols round-trips
        re = [x for s in labels for x in (s, 0)]
        assert greedy_path(one_hot_log(re, 5)) == labels
