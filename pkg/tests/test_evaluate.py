import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisyasr.corpus import NOISE_TYPES
from noisyasr.evaluate import (CellCounts, ResultsGrid, edit_distance, score_grid, tokenize, wer,
                               write_results_csv)


def brute_force_edit_cost(ref, hyp):
    """Minimum cost over every alignment (edit script), enumerated without memoization."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(brute_force_edit_cost(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
               brute_force_edit_cost(ref[1:], hyp) + 1,
               brute_force_edit_cost(ref, hyp[1:]) + 1)


def test_edit_distance_examples():
    assert edit_distance("the cat sat".split(), "the cat sat".split()) == 0
    assert edit_distance("the cat sat".split(), "the bat".split()) == 2
    assert edit_distance([], ["a", "b", "c"]) == 3


def test_edit_distance_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = list(rng.choice(["x", "y", "z"], size=rng.integers(0, 6)))
        b = list(rng.choice(["x", "y", "z"], size=rng.integers(0, 6)))
        assert edit_distance(a, b) == brute_force_edit_cost(a, b)


seqs = st.lists(st.sampled_from("abc"), max_size=6)


@settings(max_examples=100, deadline=None)
@given(a=seqs, b=seqs, c=seqs)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_wer_examples():
    assert wer("a b c", "a b c") == 0.0
    assert wer("the cat sat", "") == 100.0
    assert wer("a b c", "a b c d e f g h") == pytest.approx(500.0 / 3)
    assert wer("a b c", "x y z p q r s t") > 100.0
    with pytest.raises(ValueError):
        wer("", "a")


def test_tokenize():
    assert tokenize("Hello, World!  it's ") == ["hello", "world", "it's"]
    assert tokenize("...") == []


def test_pooled_wer_is_not_mean_of_utterances():
    c = CellCounts()
    c.add("a", "b")                # 1 edit / 1 word
    c.add("a b c d", "a b c d")    # 0 edits / 4 words
    assert c.wer == pytest.approx(20.0)
    assert c.wer != np.mean([wer("a", "b"), wer("a b c d", "a b c d")])


def grid_records(hyp_fn, snrs=(0, 5, 10, 15, 20), n_utts=2):
    recs = []
    for t in NOISE_TYPES:
        for s in snrs:
            for i in range(n_utts):
                ref = f"a b {i}"
                recs.append((t, s, ref, hyp_fn(ref)))
    recs += [(None, None, "a b c", hyp_fn("a b c"))]
    return recs


def test_perfect_grid():
    g = score_grid("m", grid_records(lambda r: r))
    assert len(g.cells) == 35
    assert set(g.cells.values()) == {0.0} and g.clean_wer == 0.0
    assert len(g.rows()) == 36


def test_single_utterance_cell_equals_wer():
    recs = grid_records(lambda r: r, n_utts=1)
    recs[0] = (recs[0][0], recs[0][1], "a b c", "a x")
    g = score_grid("m", recs)
    assert g.cells[(recs[0][0].value, 0.0)] == wer("a b c", "a x")


def test_missing_cells_reported():
    recs = [r for r in grid_records(lambda r: r) if not (r[0] is NOISE_TYPES[0] and r[1] == 5)]
    with pytest.raises(ValueError, match="Babble, 5"):
        score_grid("m", recs)


def test_results_csv(tmp_path):
    g = ResultsGrid("DAT", {("Car", 0.0): 12.345, ("Babble", 5.0): 104.2}, 3.0)
    write_results_csv([g], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == [
        "method,noise_label,snr_db,wer",
        "DAT,Babble,5,104.2",
        "DAT,Car,0,12.3",
        "DAT,Clean,,3.0",
    ]
